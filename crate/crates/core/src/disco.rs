//! Distribution-specific compensation: one residual module per student level.
//!
//! Module `C_k` is a stack of `M` blocks, each a dynamic convolution followed by instance
//! normalization and LeakyReLU. The compensated feature is `C_k(f) + f`. The last block of
//! every module starts with a zero kernel bank, so a fresh module returns its input unchanged.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, FicoError, Result};
use crate::losses::pyramid_vars;
use crate::model::{ArchConfig, FeaturePyramid};
use crate::nn::{normal_tensor, Ctx, Linear, ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

/// 3x3 convolution whose kernel is a per-sample softmax mixture of `P` kernels.
///
/// Attention: global average pool, linear to `max(C / ratio, 4)` units, ReLU, linear to `P`
/// logits, softmax. Because convolution is linear in the kernel, mixing kernels first is
/// the same as mixing the `P` convolution outputs.
#[derive(Clone, Debug)]
pub struct DynamicConv {
    /// `[P, C * C * 9]`
    pub bank: ParamId,
    /// `[P, C]`
    pub bank_bias: ParamId,
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
    pub kernels: usize,
}

impl DynamicConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernels: usize,
        ratio: usize,
        zero_init: bool,
        rng: &mut R,
    ) -> Self {
        let patch = channels * channels * 9;
        let bank = if zero_init {
            Tensor::zeros(&[kernels, patch])
        } else {
            normal_tensor(&[kernels, patch], (2.0 / (channels * 9) as f64).sqrt(), rng)
        };
        let hidden = (channels / ratio).max(4);
        DynamicConv {
            bank: store.add(format!("{name}.bank"), bank, ParamKind::Trainable),
            bank_bias: store.add(
                format!("{name}.bank_bias"),
                Tensor::zeros(&[kernels, channels]),
                ParamKind::Trainable,
            ),
            fc1: Linear::new(store, &format!("{name}.attn.fc1"), channels, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.attn.fc2"), hidden, kernels, rng),
            channels,
            kernels,
        }
    }

    /// `[B, P]` attention weights over the kernel bank.
    pub fn attention<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let pooled = cx.tape.global_avg_pool(x)?;
        let h = self.fc1.forward(cx, pooled)?;
        let h = cx.tape.relu(h);
        let logits = self.fc2.forward(cx, h)?;
        cx.tape.softmax(logits)
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (b, c, _, _) = cx.value(x).dims4()?;
        if c != self.channels {
            return Err(shape_err!(
                "dynamic conv expects {} channels, got {}",
                self.channels,
                c
            ));
        }
        let att = self.attention(cx, x)?;
        let bank = cx.param(self.bank);
        let bank_bias = cx.param(self.bank_bias);
        let mixed = cx.tape.matmul(att, bank)?;
        let kernel = cx.tape.reshape(mixed, &[b, c, c, 3, 3])?;
        let bias = cx.tape.matmul(att, bank_bias)?;
        cx.tape.conv2d(x, kernel, Some(bias), 1, 1)
    }
}

#[derive(Clone, Debug)]
pub struct DiscoBlock {
    pub conv: DynamicConv,
}

impl DiscoBlock {
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = cx.tape.instance_norm(y, T::of(INSTANCE_NORM_EPS))?;
        Ok(cx.tape.leaky_relu(y, T::of(LEAKY_SLOPE)))
    }
}

/// `C_k` for one level.
#[derive(Clone, Debug)]
pub struct DiscoModule {
    pub blocks: Vec<DiscoBlock>,
}

impl DiscoModule {
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let mut y = x;
        for b in &self.blocks {
            y = b.forward(cx, y)?;
        }
        Ok(y)
    }
}

/// Compensation modules for all `K` levels.
#[derive(Clone, Debug)]
pub struct DiscoStack {
    pub levels: Vec<DiscoModule>,
}

impl DiscoStack {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        arch: &ArchConfig,
        rng: &mut R,
    ) -> Self {
        let levels = (0..arch.levels)
            .map(|k| DiscoModule {
                blocks: (0..arch.disco_blocks)
                    .map(|m| DiscoBlock {
                        conv: DynamicConv::new(
                            store,
                            &format!("disco.k{}.block{}.dyconv", k + 1, m + 1),
                            arch.channels(k),
                            arch.dyconv_kernels,
                            arch.attention_ratio,
                            m + 1 == arch.disco_blocks,
                            rng,
                        ),
                    })
                    .collect(),
            })
            .collect();
        DiscoStack { levels }
    }

    fn module(&self, k: usize) -> Result<&DiscoModule> {
        self.levels.get(k).ok_or_else(|| {
            FicoError::InvalidArgument(format!(
                "level index {k} out of range (K = {})",
                self.levels.len()
            ))
        })
    }

    /// `C_k(x)`, the compensation signal without the shortcut.
    pub fn signal<T: Scalar>(&self, cx: &mut Ctx<T>, k: usize, x: Var) -> Result<Var> {
        self.module(k)?.forward(cx, x)
    }

    /// `C_k(x) + x` on the tape.
    pub fn compensate_var<T: Scalar>(&self, cx: &mut Ctx<T>, k: usize, x: Var) -> Result<Var> {
        let s = self.signal(cx, k, x)?;
        cx.tape.add(s, x)
    }

    /// `f_F = C_k(f) + f` for a `[B, C, H, W]` (or `[C, H, W]`) level feature.
    pub fn compensate<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        level_feat: &Tensor<T>,
        k: usize,
    ) -> Result<Tensor<T>> {
        self.module(k)?;
        let mut cx = Ctx::new(store, false);
        let x = cx.input(crate::model::as_batch(level_feat)?);
        let y = self.compensate_var(&mut cx, k, x)?;
        cx.value(y).clone().reshape(level_feat.shape())
    }
}

/// Compensation loss on the tape: per-level location-wise cosine distance between teacher
/// and compensated student, plus `alpha` times the same over every augmented view.
pub fn co_loss<T: Scalar>(
    tape: &mut Tape<T>,
    teacher: &[Var],
    teacher_views: &[Vec<Var>],
    comp: &[Var],
    comp_views: &[Vec<Var>],
    alpha: f64,
) -> Result<Var> {
    if teacher_views.len() != comp_views.len() {
        return Err(shape_err!(
            "compensation loss: {} teacher views vs {} compensated views",
            teacher_views.len(),
            comp_views.len()
        ));
    }
    if teacher_views.is_empty() {
        return Err(FicoError::InvalidArgument(
            "compensation loss needs at least one view".into(),
        ));
    }
    if alpha.is_nan() || alpha < 0.0 {
        return Err(FicoError::InvalidArgument(format!(
            "alpha must be non-negative, got {alpha}"
        )));
    }
    let mut terms = Vec::new();
    for (e, f) in pair_levels(teacher, comp)? {
        terms.push((tape.cosine_location(e, f)?, 1.0));
    }
    for (tv, cv) in teacher_views.iter().zip(comp_views) {
        for (e, f) in pair_levels(tv, cv)? {
            terms.push((tape.cosine_location(e, f)?, alpha));
        }
    }
    tape.weighted_sum(&terms)
}

fn pair_levels(a: &[Var], b: &[Var]) -> Result<impl Iterator<Item = (Var, Var)>> {
    if a.len() != b.len() {
        return Err(shape_err!(
            "pyramids with {} and {} levels",
            a.len(),
            b.len()
        ));
    }
    Ok(a.iter()
        .copied()
        .zip(b.iter().copied())
        .collect::<Vec<_>>()
        .into_iter())
}

/// Compensation loss on concrete pyramids.
pub fn loss_co<T: Scalar>(
    teacher: &FeaturePyramid<T>,
    teacher_views: &[FeaturePyramid<T>],
    comp: &FeaturePyramid<T>,
    comp_views: &[FeaturePyramid<T>],
    alpha: f64,
) -> Result<f64> {
    teacher.check_paired(comp)?;
    for (t, c) in teacher_views.iter().zip(comp_views) {
        teacher.check_paired(t)?;
        teacher.check_paired(c)?;
    }
    let mut tape = Tape::new();
    let e = pyramid_vars(&mut tape, teacher);
    let f = pyramid_vars(&mut tape, comp);
    let ev: Vec<Vec<Var>> = teacher_views
        .iter()
        .map(|p| pyramid_vars(&mut tape, p))
        .collect();
    let fv: Vec<Vec<Var>> = comp_views
        .iter()
        .map(|p| pyramid_vars(&mut tape, p))
        .collect();
    let l = co_loss(&mut tape, &e, &ev, &f, &fv, alpha)?;
    Ok(tape.value(l).item().f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            base_channels: 4,
            levels: 2,
            ..Default::default()
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        normal_tensor(shape, 1.0, &mut rng)
    }

    #[test]
    fn fresh_module_is_the_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stack = DiscoStack::new(&mut store, &tiny_arch(), &mut rng);
        let x = random(&[2, 8, 4, 4], 1);
        let y = stack.compensate(&store, &x, 1).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn residual_decomposition_is_exact() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stack = DiscoStack::new(&mut store, &tiny_arch(), &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = normal_tensor(&shape, 0.3, &mut rng);
        }
        let x = random(&[1, 4, 4, 4], 5);
        let y = stack.compensate(&store, &x, 0).unwrap();
        let mut cx = Ctx::new(&store, false);
        let xv = cx.input(x.clone());
        let s = stack.signal(&mut cx, 0, xv).unwrap();
        let signal = cx.value(s).clone();
        for ((&yy, &xx), &ss) in y.data().iter().zip(x.data()).zip(signal.data()) {
            assert_eq!(yy, ss + xx);
        }
    }

    #[test]
    fn level_index_out_of_range_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = DiscoStack::new(&mut store, &tiny_arch(), &mut rng);
        let err = stack
            .compensate(&store, &random(&[1, 4, 4, 4], 0), 2)
            .unwrap_err();
        assert!(matches!(err, FicoError::InvalidArgument(_)));
    }

    #[test]
    fn attention_is_a_probability_vector() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conv = DynamicConv::new(&mut store, "d", 8, 4, 4, false, &mut rng);
        let mut cx = Ctx::new(&store, false);
        let x = cx.input(random(&[3, 8, 5, 5], 2));
        let a = conv.attention(&mut cx, x).unwrap();
        for row in cx.value(a).data().chunks(4) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn equal_logits_reduce_to_the_mean_kernel() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let conv = DynamicConv::new(&mut store, "d", 3, 4, 4, false, &mut rng);
        *store.get_mut(conv.fc2.weight) = Tensor::zeros(store.get(conv.fc2.weight).shape());
        *store.get_mut(conv.bank_bias) = random(&[4, 3], 12);
        let x = random(&[2, 3, 6, 6], 13);

        let mut cx = Ctx::new(&store, false);
        let xv = cx.input(x.clone());
        let y = conv.forward(&mut cx, xv).unwrap();
        let dynamic = cx.value(y).clone();

        let bank = store.get(conv.bank);
        let patch = 81;
        let mean_kernel: Vec<f64> = (0..patch)
            .map(|i| (0..4).map(|p| bank.data()[p * patch + i]).sum::<f64>() / 4.0)
            .collect();
        let bb = store.get(conv.bank_bias);
        let mean_bias: Vec<f64> = (0..3)
            .map(|c| (0..4).map(|p| bb.data()[p * 3 + c]).sum::<f64>() / 4.0)
            .collect();
        let mut tape = Tape::new();
        let xs = tape.constant(x);
        let w = tape.constant(Tensor::from_vec(&[3, 3, 3, 3], mean_kernel).unwrap());
        let b = tape.constant(Tensor::from_vec(&[3], mean_bias).unwrap());
        let s = tape.conv2d(xs, w, Some(b), 1, 1).unwrap();
        assert!(tape.value(s).max_abs_diff(&dynamic) < 1e-6);
    }
}
