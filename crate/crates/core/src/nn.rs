//! Parameter storage, forward contexts, basic layers and the Adam optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{FicoError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Trainable,
    Frozen,
    /// Non-differentiable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Named tensors in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.kind(id) == ParamKind::Trainable)
            .collect()
    }

    /// Marks every trainable parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) && e.kind == ParamKind::Trainable {
                e.kind = ParamKind::Frozen;
            }
        }
    }

    /// Replaces the value of an existing entry, checking the shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| FicoError::Checkpoint(format!("unknown parameter {name}")))?;
        if self.get(id).shape() != value.shape() {
            return Err(FicoError::Checkpoint(format!(
                "{name}: stored shape {:?}, model expects {:?}",
                value.shape(),
                self.get(id).shape()
            )));
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    kind: e.kind,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over names, shapes and 32-bit values of entries starting with `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            h.update(e.name.as_bytes());
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update((v.f64() as f32).to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>], momentum: f64) {
        let m = T::of(momentum);
        for u in updates {
            for (id, batch) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
                for (r, &b) in self.get_mut(id).data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Running-statistics update requested by a batch-norm layer during training.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance.
    pub batch_var: Vec<T>,
}

/// Gradients for trainable parameters plus pending batch-norm updates.
pub struct StepGrads<T> {
    pub loss: T,
    pub grads: Vec<(ParamId, Tensor<T>)>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

/// One forward pass: a fresh tape with parameters bound lazily from a store.
pub struct Ctx<'s, T: Scalar> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    training: bool,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'s, T: Scalar> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>, training: bool) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            training,
            bn_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.store.kind(id)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let trainable = self.store.kind(id) == ParamKind::Trainable;
        let v = self.tape.leaf(self.store.get(id).clone(), trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub(crate) fn record_bn(&mut self, update: BnUpdate<T>) {
        self.bn_updates.push(update);
    }

    pub fn bn_updates(self) -> Vec<BnUpdate<T>> {
        self.bn_updates
    }

    /// Back-propagates `loss` and collects gradients of all bound trainable parameters.
    pub fn backward(self, loss: Var) -> Result<StepGrads<T>> {
        let lv = self.tape.value(loss).item();
        if !lv.is_finite() {
            return Err(FicoError::NonFinite("loss".into()));
        }
        let mut g = self.tape.backward(loss)?;
        let mut grads = Vec::new();
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(v) = b {
                if self.tape.requires_grad(*v) {
                    let t = g
                        .take(*v)
                        .unwrap_or_else(|| Tensor::zeros(self.tape.shape(*v)));
                    grads.push((ParamId(i), t));
                }
            }
        }
        Ok(StepGrads {
            loss: lv,
            grads,
            bn_updates: self.bn_updates,
        })
    }
}

pub(crate) fn normal_tensor<T: Scalar, R: Rng>(
    shape: &[usize],
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(&[cout, cin, k, k], std, rng),
            ParamKind::Trainable,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Tensor::zeros(&[cout]),
                ParamKind::Trainable,
            )
        });
        Conv2d {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::full(&[c], T::one()),
                ParamKind::Trainable,
            ),
            beta: store.add(
                format!("{name}.beta"),
                Tensor::zeros(&[c]),
                ParamKind::Trainable,
            ),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[c]),
                ParamKind::Buffer,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[c], T::one()),
                ParamKind::Buffer,
            ),
        }
    }

    /// Batch statistics while training a trainable layer, running statistics otherwise.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let g = cx.param(self.gamma);
        let b = cx.param(self.beta);
        let eps = T::of(BN_EPS);
        if cx.is_training() && cx.kind(self.gamma) == ParamKind::Trainable {
            let (y, mean, var) = cx.tape.batch_norm(x, g, b, eps)?;
            let (bsz, _, h, w) = cx.value(x).dims4()?;
            let n = (bsz * h * w) as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            cx.record_bn(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch_mean: mean,
                batch_var: var.into_iter().map(|v| v * T::of(unbias)).collect(),
            });
            Ok(y)
        } else {
            let store = cx.store();
            let mean = store.get(self.running_mean).data();
            let var = store.get(self.running_var).data();
            cx.tape.fixed_norm(x, g, b, mean, var, eps)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fin: usize,
        fout: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / fin as f64).sqrt();
        Linear {
            weight: store.add(
                format!("{name}.weight"),
                normal_tensor(&[fout, fin], std, rng),
                ParamKind::Trainable,
            ),
            bias: store.add(
                format!("{name}.bias"),
                Tensor::zeros(&[fout]),
                ParamKind::Trainable,
            ),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        cx.tape.linear(x, w, Some(b))
    }
}

/// Convolution, batch normalization and optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        relu: bool,
        rng: &mut R,
    ) -> Self {
        ConvBn {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                cin,
                cout,
                k,
                stride,
                false,
                rng,
            ),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
            relu,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        Ok(if self.relu { cx.tape.relu(y) } else { y })
    }
}

/// Basic residual block: two 3x3 conv-bn layers plus an identity or 1x1 projection shortcut.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub body1: ConvBn,
    pub body2: ConvBn,
    pub shortcut: Option<ConvBn>,
}

impl ResBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let shortcut = (cin != cout || stride != 1).then(|| {
            ConvBn::new(
                store,
                &format!("{name}.shortcut"),
                cin,
                cout,
                1,
                stride,
                false,
                rng,
            )
        });
        ResBlock {
            body1: ConvBn::new(
                store,
                &format!("{name}.body1"),
                cin,
                cout,
                3,
                stride,
                true,
                rng,
            ),
            body2: ConvBn::new(
                store,
                &format!("{name}.body2"),
                cout,
                cout,
                3,
                1,
                false,
                rng,
            ),
            shortcut,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.body1.forward(cx, x)?;
        let y = self.body2.forward(cx, y)?;
        let s = match &self.shortcut {
            Some(sc) => sc.forward(cx, x)?,
            None => x,
        };
        let sum = cx.tape.add(y, s)?;
        Ok(cx.tape.relu(sum))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<T> {
    cfg: AdamConfig,
    step: i32,
    moments: HashMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Changes the step size used by later steps; moment estimates are kept.
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        self.step += 1;
        let b1 = T::of(self.cfg.beta1);
        let b2 = T::of(self.cfg.beta2);
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let lr = T::of(self.cfg.lr);
        let eps = T::of(self.cfg.eps);
        for (id, g) in grads {
            if store.kind(*id) != ParamKind::Trainable {
                continue;
            }
            let n = g.numel();
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let p = store.get_mut(*id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] = p[i] - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add(
            "x",
            Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap(),
            ParamKind::Trainable,
        );
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..500 {
            let g: Vec<f64> = store.get(id).data().iter().map(|v| 2.0 * v).collect();
            opt.step(&mut store, &[(id, Tensor::from_vec(&[2], g).unwrap())]);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 1, true, &mut rng);
        store.freeze_prefix("c.");
        let mut cx = Ctx::new(&store, true);
        let x = cx.input(Tensor::full(&[1, 2, 4, 4], 0.5));
        let y = conv.forward(&mut cx, x).unwrap();
        let z = cx.tape.mse(y, y).unwrap();
        let grads = cx.backward(z).unwrap();
        assert!(grads.grads.is_empty());
    }

    #[test]
    fn digest_changes_with_values() {
        let mut a = ParamStore::<f32>::new();
        a.add("w", Tensor::zeros(&[3]), ParamKind::Trainable);
        let d0 = a.digest("");
        a.get_mut(ParamId(0)).data_mut()[1] = 1.0;
        assert_ne!(d0, a.digest(""));
        assert_eq!(a.digest("w"), a.digest(""));
    }
}
