use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ArchConfig;
use crate::autograd::Var;
use crate::error::{shape_err, FicoError, Result};
use crate::nn::{Adam, AdamConfig, ConvBn, Ctx, Linear, ParamStore, ResBlock, BN_MOMENTUM};
use crate::tensor::{Scalar, Tensor};

/// Encoder: stride-2 conv stem, 2x2 max pool, then one residual stage per pyramid level.
/// Stage 1 keeps the resolution, later stages halve it and double the channels.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub stem: ConvBn,
    pub stages: Vec<ResBlock>,
    /// Auxiliary classification head, used only while pretraining.
    pub head: Linear,
    divisor: usize,
}

impl Teacher {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        arch: &ArchConfig,
        rng: &mut R,
    ) -> Self {
        let stem = ConvBn::new(store, "teacher.stem", 3, arch.channels(0), 3, 2, true, rng);
        let stages = (0..arch.levels)
            .map(|k| {
                let cin = if k == 0 {
                    arch.channels(0)
                } else {
                    arch.channels(k - 1)
                };
                let stride = if k == 0 { 1 } else { 2 };
                ResBlock::new(
                    store,
                    &format!("teacher.stage{}", k + 1),
                    cin,
                    arch.channels(k),
                    stride,
                    rng,
                )
            })
            .collect();
        let head = Linear::new(
            store,
            "teacher.head",
            arch.channels(arch.levels - 1),
            arch.aux_classes,
            rng,
        );
        Teacher {
            stem,
            stages,
            head,
            divisor: arch.input_divisor(),
        }
    }

    /// Feature pyramid of an image batch, finest level first.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, images: Var) -> Result<Vec<Var>> {
        let (_, c, h, w) = cx.value(images).dims4()?;
        if c != 3 || h == 0 || w == 0 || h % self.divisor != 0 || w % self.divisor != 0 {
            return Err(shape_err!(
                "encode: input {:?} must be 3 channels with sides divisible by {}",
                cx.value(images).shape(),
                self.divisor
            ));
        }
        let x = self.stem.forward(cx, images)?;
        let x = cx.tape.max_pool2(x)?;
        let first = self.stages[0].forward(cx, x)?;
        let mut levels = vec![first];
        levels.extend(self.deeper_from(cx, first)?);
        Ok(levels)
    }

    /// Recomputes levels `1..K` from a (possibly adapted) finest level.
    pub fn deeper_from<T: Scalar>(&self, cx: &mut Ctx<T>, level0: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.stages.len() - 1);
        let mut x = level0;
        for stage in &self.stages[1..] {
            x = stage.forward(cx, x)?;
            out.push(x);
        }
        Ok(out)
    }

    pub fn logits<T: Scalar>(&self, cx: &mut Ctx<T>, images: Var) -> Result<Var> {
        let levels = self.forward(cx, images)?;
        let pooled = cx.tape.global_avg_pool(*levels.last().expect("levels"))?;
        self.head.forward(cx, pooled)
    }
}

#[derive(Clone, Debug)]
pub struct AuxSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub target_accuracy: f64,
    pub holdout_fraction: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            max_epochs: 30,
            batch_size: 16,
            lr: 0.002,
            target_accuracy: 0.9,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub seed: u64,
    pub epochs: usize,
    pub holdout_accuracy: f64,
    pub final_loss: f64,
    pub digest: String,
}

/// Trains a teacher on the auxiliary classification set and freezes it.
///
/// Stops at the first epoch whose held-out accuracy reaches the target, or after
/// `max_epochs`. The returned store holds only `teacher.*` entries, all frozen.
pub fn make_teacher(
    seed: u64,
    aux: &[AuxSample],
    arch: &ArchConfig,
    cfg: &TeacherConfig,
) -> Result<(ParamStore<f32>, Teacher, TeacherReport)> {
    arch.validate()?;
    if aux.len() < 2 {
        return Err(FicoError::InvalidArgument(
            "auxiliary dataset needs at least two samples".into(),
        ));
    }
    if let Some(s) = aux.iter().find(|s| s.label >= arch.aux_classes) {
        return Err(FicoError::InvalidArgument(format!(
            "auxiliary label {} out of range",
            s.label
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let teacher = Teacher::new(&mut store, arch, &mut rng);

    let mut order: Vec<usize> = (0..aux.len()).collect();
    order.shuffle(&mut rng);
    let n_hold =
        ((aux.len() as f64 * cfg.holdout_fraction).round() as usize).clamp(1, aux.len() - 1);
    let (holdout, train) = order.split_at(n_hold);
    let mut train = train.to_vec();

    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut accuracy = 0.0;
    let mut final_loss = f64::NAN;
    let mut epochs = 0;
    for epoch in 0..cfg.max_epochs {
        // Cosine decay over the epoch budget.
        let progress = epoch as f64 / cfg.max_epochs as f64;
        opt.set_lr(cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        train.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (step, chunk) in train.chunks(cfg.batch_size.max(1)).enumerate() {
            let images: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &aux[i].image).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| aux[i].label).collect();
            let mut cx = Ctx::new(&store, true);
            let x = cx.input(Tensor::stack(&images)?);
            let logits = teacher.logits(&mut cx, x)?;
            let loss = cx.tape.cross_entropy(logits, &labels)?;
            let lv = cx.value(loss).item();
            if !lv.is_finite() {
                return Err(FicoError::NonFinite(format!(
                    "teacher cross-entropy diverged at epoch {epoch}, step {step}"
                )));
            }
            let grads = cx.backward(loss)?;
            opt.step(&mut store, &grads.grads);
            store.apply_bn_updates(&grads.bn_updates, BN_MOMENTUM);
            loss_sum += lv as f64;
            batches += 1;
        }
        final_loss = loss_sum / batches.max(1) as f64;
        accuracy = holdout_accuracy(&teacher, &store, aux, holdout)?;
        epochs = epoch + 1;
        info!("teacher epoch {epochs}: loss {final_loss:.4}, held-out accuracy {accuracy:.3}");
        if accuracy >= cfg.target_accuracy {
            break;
        }
    }
    store.freeze_prefix("teacher.");
    let digest = store.digest("teacher.");
    Ok((
        store,
        teacher,
        TeacherReport {
            seed,
            epochs,
            holdout_accuracy: accuracy,
            final_loss,
            digest,
        },
    ))
}

fn holdout_accuracy(
    teacher: &Teacher,
    store: &ParamStore<f32>,
    aux: &[AuxSample],
    idx: &[usize],
) -> Result<f64> {
    let mut correct = 0;
    for chunk in idx.chunks(32) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &aux[i].image).collect();
        let mut cx = Ctx::new(store, false);
        let x = cx.input(Tensor::stack(&images)?);
        let logits = teacher.logits(&mut cx, x)?;
        let k = cx.value(logits).shape()[1];
        for (row, &i) in cx.value(logits).data().chunks(k).zip(chunk) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0;
            if pred == aux[i].label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / idx.len() as f64)
}
