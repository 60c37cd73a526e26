//! Distribution-invariant filter: a training-only chain that carries the finest compensation
//! signal `C_1(f^{D_1})` down the pyramid so every deeper compensation module can be matched
//! against it.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, FicoError, Result};
use crate::losses::consistency_loss;
use crate::model::{as_batch, ArchConfig};
use crate::nn::{ConvBn, Ctx, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// `K - 1` blocks of (3x3 stride-2 convolution doubling channels, batch norm, ReLU).
#[derive(Clone, Debug)]
pub struct DiifiChain {
    /// `blocks[i]` maps level `i` to level `i + 1`.
    pub blocks: Vec<ConvBn>,
}

impl DiifiChain {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        arch: &ArchConfig,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..arch.levels - 1)
            .map(|i| {
                ConvBn::new(
                    store,
                    &format!("diifi.k{}", i + 2),
                    arch.channels(i),
                    arch.channels(i + 1),
                    3,
                    2,
                    true,
                    rng,
                )
            })
            .collect();
        DiifiChain { blocks }
    }

    /// Outputs for levels `1..K` (zero-based), each consuming the previous one.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, base: Var) -> Result<Vec<Var>> {
        let (_, _, h, w) = cx.value(base).dims4()?;
        let div = 1usize << self.blocks.len();
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(shape_err!(
                "filter chain: {}x{} not divisible by {}",
                h,
                w,
                div
            ));
        }
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut x = base;
        for b in &self.blocks {
            x = b.forward(cx, x)?;
            out.push(x);
        }
        Ok(out)
    }

    /// Runs the chain on a concrete base signal using batch statistics, as during training.
    pub fn transform_chain<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        base: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let squeeze = base.ndim() == 3;
        let mut cx = Ctx::new(store, true);
        let x = cx.input(as_batch(base)?);
        let outs = self.forward(&mut cx, x)?;
        outs.iter()
            .map(|&v| {
                let t = cx.value(v).clone();
                if squeeze {
                    let s = t.shape()[1..].to_vec();
                    t.reshape(&s)
                } else {
                    Ok(t)
                }
            })
            .collect()
    }
}

/// Sum over levels of the element-mean squared error between compensation signals and chain
/// outputs, for the original batch and every view.
pub fn mse_loss<T: Scalar>(
    tape: &mut Tape<T>,
    signals: &[Var],
    chain: &[Var],
    signal_views: &[Vec<Var>],
    chain_views: &[Vec<Var>],
) -> Result<Var> {
    if signal_views.len() != chain_views.len() {
        return Err(shape_err!(
            "mse loss: {} vs {} views",
            signal_views.len(),
            chain_views.len()
        ));
    }
    let mut terms = Vec::new();
    let groups = std::iter::once((signals, chain)).chain(
        signal_views
            .iter()
            .zip(chain_views)
            .map(|(s, c)| (s.as_slice(), c.as_slice())),
    );
    for (s, c) in groups {
        if s.len() != c.len() {
            return Err(shape_err!(
                "mse loss: {} signals vs {} chain outputs",
                s.len(),
                c.len()
            ));
        }
        for (&a, &b) in s.iter().zip(c) {
            terms.push((tape.mse(a, b)?, 1.0));
        }
    }
    tape.weighted_sum(&terms)
}

/// [`mse_loss`] on concrete tensors.
pub fn loss_mse<T: Scalar>(
    signals: &[Tensor<T>],
    chain: &[Tensor<T>],
    signal_views: &[Vec<Tensor<T>>],
    chain_views: &[Vec<Tensor<T>>],
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut lift = |ts: &[Tensor<T>]| {
        ts.iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Vec<_>>()
    };
    let s = lift(signals);
    let c = lift(chain);
    let sv: Vec<Vec<Var>> = signal_views.iter().map(|v| lift(v)).collect();
    let cv: Vec<Vec<Var>> = chain_views.iter().map(|v| lift(v)).collect();
    let l = mse_loss(&mut tape, &s, &c, &sv, &cv)?;
    Ok(tape.value(l).item().f64())
}

/// Normality consistency: flattened cosine distance between the finest compensation signal of
/// the original and of each view, summed over views.
pub fn loss_nor<T: Scalar>(base: &Tensor<T>, views: &[Tensor<T>]) -> Result<f64> {
    if views.is_empty() {
        return Err(FicoError::InvalidArgument(
            "normality loss needs at least one view".into(),
        ));
    }
    let mut tape = Tape::new();
    let b = tape.constant(as_batch(base)?);
    let vs = views
        .iter()
        .map(|v| Ok(tape.constant(as_batch(v)?)))
        .collect::<Result<Vec<_>>>()?;
    let l = consistency_loss(&mut tape, b, &vs)?;
    Ok(tape.value(l).item().f64())
}

/// `l_lowf + beta * l_mse + gamma * l_nor`.
pub fn loss_fi(l_lowf: f64, l_mse: f64, l_nor: f64, beta: f64, gamma: f64) -> Result<f64> {
    for (name, v) in [("l_lowf", l_lowf), ("l_mse", l_mse), ("l_nor", l_nor)] {
        if !v.is_finite() {
            return Err(FicoError::NonFinite(name.into()));
        }
    }
    if !(beta >= 0.0 && gamma >= 0.0) {
        return Err(FicoError::InvalidArgument(format!(
            "weights must be non-negative: beta {beta}, gamma {gamma}"
        )));
    }
    Ok(l_lowf + beta * l_mse + gamma * l_nor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{normal_tensor, ParamKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chain_shapes_follow_the_pyramid() {
        let arch = ArchConfig::default();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chain = DiifiChain::new(&mut store, &arch, &mut rng);
        let base = normal_tensor(&[16, 16, 16], 1.0, &mut rng);
        let out = chain.transform_chain(&store, &base).unwrap();
        let shapes: Vec<_> = out.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![32, 8, 8], vec![64, 4, 4]]);
    }

    #[test]
    fn zero_base_gives_zero_outputs() {
        let arch = ArchConfig::default();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let chain = DiifiChain::new(&mut store, &arch, &mut rng);
        let out = chain
            .transform_chain(&store, &Tensor::zeros(&[2, 16, 16, 16]))
            .unwrap();
        assert!(out.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn indivisible_base_is_rejected() {
        let arch = ArchConfig::default();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let chain = DiifiChain::new(&mut store, &arch, &mut rng);
        assert!(chain
            .transform_chain(&store, &Tensor::zeros(&[16, 6, 6]))
            .is_err());
    }

    #[test]
    fn mse_of_constant_difference() {
        let a = Tensor::<f64>::full(&[1, 2, 3, 3], 1.5);
        let b = Tensor::<f64>::full(&[1, 2, 3, 3], 1.0);
        let l = loss_mse(std::slice::from_ref(&a), std::slice::from_ref(&b), &[], &[]).unwrap();
        assert!((l - 0.25).abs() < 1e-15);
        assert_eq!(
            loss_mse(std::slice::from_ref(&a), std::slice::from_ref(&a), &[], &[]).unwrap(),
            0.0
        );
    }

    #[test]
    fn nor_extremes() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        assert!(loss_nor(&x, std::slice::from_ref(&x)).unwrap().abs() < 1e-15);
        let orth = Tensor::<f64>::from_vec(&[1, 2, 1, 1], vec![-2.0, 1.0]).unwrap();
        assert!((loss_nor(&x, &[orth]).unwrap() - 1.0).abs() < 1e-15);
        let neg = x.map(|v| -v);
        assert!((loss_nor(&x, &[neg]).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn fi_weighted_sum() {
        assert!((loss_fi(0.5, 1.0, 0.2, 0.02, 1.0).unwrap() - 0.72).abs() < 1e-12);
        assert_eq!(loss_fi(0.0, 0.0, 0.0, 0.02, 1.0).unwrap(), 0.0);
        assert_eq!(loss_fi(0.3, 5.0, 7.0, 0.0, 0.0).unwrap(), 0.3);
        assert!(loss_fi(f64::NAN, 0.0, 0.0, 0.02, 1.0).is_err());
    }

    #[test]
    fn chain_weights_are_trainable() {
        let arch = ArchConfig::default();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        DiifiChain::new(&mut store, &arch, &mut rng);
        assert!(store
            .entries()
            .iter()
            .filter(|e| e.name.ends_with("weight"))
            .all(|e| e.kind == ParamKind::Trainable));
    }
}
