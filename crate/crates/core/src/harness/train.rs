//! Teacher preparation and the training loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::dataset::{discover_categories, load_aux, load_train};
use crate::checkpoint::{self, CheckpointReader};
use crate::error::{FicoError, Result};
use crate::io::write_json_atomic;
use crate::losses::{build_objective, LossBreakdown, Mode};
use crate::model::{make_teacher, ArchConfig, Components, RdNetwork, TeacherConfig, TeacherReport};
use crate::nn::{Adam, Ctx, ParamStore, BN_MOMENTUM};
use crate::shift::{make_views, stream_seed, AugmentPolicy};
use crate::tensor::Tensor;

pub const TEACHER_PREFIX: &str = "teacher.";
pub const DIIFI_PREFIX: &str = "diifi.";

const TAG_INIT: u64 = 11;
const TAG_ORDER: u64 = 12;
const TAG_VIEWS: u64 = 13;

/// Builds a teacher on the auxiliary set under `data` and writes it to `dir`.
pub fn build_teacher(
    data: &Path,
    dir: &Path,
    seed: u64,
    arch: &ArchConfig,
    tcfg: &TeacherConfig,
    image_size: usize,
) -> Result<TeacherReport> {
    let (classes, aux) = load_aux(data, image_size)?;
    if classes.len() != arch.aux_classes {
        return Err(FicoError::Dataset(format!(
            "auxiliary set has {} classes, the architecture expects {}",
            classes.len(),
            arch.aux_classes
        )));
    }
    let (store, _, report) = make_teacher(seed, &aux, arch, tcfg)?;
    checkpoint::save(
        dir,
        &store,
        |n| n.starts_with(TEACHER_PREFIX),
        serde_json::json!({ "kind": "teacher", "arch": arch, "classes": classes, "report": report }),
    )?;
    info!(
        "teacher: {} epochs, held-out accuracy {:.3}, digest {}",
        report.epochs, report.holdout_accuracy, report.digest
    );
    Ok(report)
}

/// Path of the teacher checkpoint for a run, building it first when the config names none.
pub fn ensure_teacher(cfg: &RunConfig) -> Result<PathBuf> {
    if let Some(p) = &cfg.teacher {
        return Ok(p.clone());
    }
    let dir = cfg.out.join("teacher");
    if !dir.join(checkpoint::MANIFEST_FILE).exists() {
        build_teacher(
            &cfg.dataset,
            &dir,
            cfg.teacher_seed,
            &cfg.arch,
            &cfg.teacher_training,
            cfg.image_size,
        )?;
    }
    Ok(dir)
}

/// Loss components of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub category: String,
    pub mode: Mode,
    pub checkpoint: PathBuf,
    pub trajectory: Vec<StepRecord>,
    pub teacher_digest: String,
    pub seconds: f64,
}

impl TrainOutcome {
    /// Names of the loss components present in every step.
    pub fn trace_components(&self) -> Vec<&'static str> {
        match self.trajectory.first() {
            Some(s) => s
                .losses
                .components()
                .iter()
                .filter(|(_, v)| v.is_some())
                .map(|(n, _)| *n)
                .collect(),
            None => Vec::new(),
        }
    }
}

pub fn components(mode: Mode) -> Components {
    Components {
        disco: mode.uses_disco(),
        diifi: mode.uses_diifi(),
    }
}

/// Checkpoint directory of one category inside a run directory.
pub fn checkpoint_dir(run: &Path, category: &str) -> PathBuf {
    run.join(category).join("checkpoint")
}

/// A fresh network for `mode` with teacher weights copied from the teacher checkpoint and
/// frozen.
pub fn init_network(
    cfg: &RunConfig,
    teacher: &CheckpointReader,
) -> Result<(ParamStore<f32>, RdNetwork)> {
    let mut store = ParamStore::new();
    let net = RdNetwork::new(
        &mut store,
        &cfg.arch,
        components(cfg.mode),
        stream_seed(cfg.seed, &[TAG_INIT]),
    )?;
    checkpoint::load_into(teacher, &mut store, |n| n.starts_with(TEACHER_PREFIX))?;
    store.freeze_prefix(TEACHER_PREFIX);
    Ok((store, net))
}

/// Trains one category and returns the trained store alongside the outcome. Nothing is written.
pub fn train_category(
    cfg: &RunConfig,
    teacher: &CheckpointReader,
    images: &[Tensor<f32>],
) -> Result<(ParamStore<f32>, RdNetwork, Vec<StepRecord>, String)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(FicoError::Dataset("no training images".into()));
    }
    let (mut store, net) = init_network(cfg, teacher)?;
    let teacher_digest = store.digest(TEACHER_PREFIX);
    let mut opt = Adam::new(cfg.optimizer);
    let mode = cfg.mode;
    let with_chain = mode.uses_diifi();
    let mut trajectory = Vec::new();
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(
            cfg.seed,
            &[TAG_ORDER, epoch as u64],
        )));
        let policy = AugmentPolicy {
            seed: stream_seed(cfg.seed ^ cfg.augment.seed, &[TAG_VIEWS, epoch as u64]),
            ..cfg.augment.clone()
        };
        let mut epoch_total = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (step, batch) in batches.iter().enumerate() {
            let originals: Vec<&Tensor<f32>> = batch.iter().map(|&i| &images[i]).collect();
            let x = Tensor::stack(&originals)?;
            let view_batches = if mode.uses_views() {
                let per_image = batch
                    .iter()
                    .map(|&i| make_views(&images[i], &policy, i as u64))
                    .collect::<Result<Vec<_>>>()?;
                (0..policy.views)
                    .map(|v| Tensor::stack(&per_image.iter().map(|vs| &vs[v]).collect::<Vec<_>>()))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            let mut cx = Ctx::new(&store, true);
            let xv = cx.input(x);
            let orig = net.forward(&mut cx, xv, with_chain)?;
            let mut views = Vec::with_capacity(view_batches.len());
            for vb in view_batches {
                let v = cx.input(vb);
                views.push(net.forward(&mut cx, v, with_chain)?);
            }
            let terms = build_objective(&mut cx.tape, mode, &cfg.weights, &orig, &views)?;
            let losses = terms.breakdown(&cx.tape);
            if let Some(name) = losses.first_non_finite() {
                return Err(FicoError::NonFinite(format!(
                    "{name} at epoch {epoch}, step {step}"
                )));
            }
            let total = terms.total.ok_or(FicoError::MissingComponent {
                component: "total",
                mode: mode.to_string(),
            })?;
            let grads = cx.backward(total)?;
            if let Some((id, _)) = grads.grads.iter().find(|(_, g)| !g.all_finite()) {
                return Err(FicoError::NonFinite(format!(
                    "gradient of {} at epoch {epoch}, step {step}",
                    store.entry(*id).name
                )));
            }
            opt.step(&mut store, &grads.grads);
            store.apply_bn_updates(&grads.bn_updates, BN_MOMENTUM);
            epoch_total += losses.total;
            trajectory.push(StepRecord {
                epoch,
                step,
                losses,
            });
        }
        info!(
            "{mode} epoch {}: mean loss {:.5}",
            epoch + 1,
            epoch_total / batches.len() as f64
        );
    }
    let after = store.digest(TEACHER_PREFIX);
    if after != teacher_digest {
        return Err(FicoError::Invariant(format!(
            "teacher weights changed during training ({teacher_digest} -> {after})"
        )));
    }
    Ok((store, net, trajectory, teacher_digest))
}

/// Metadata stored with every trained checkpoint.
pub fn checkpoint_metadata(
    cfg: &RunConfig,
    category: &str,
    teacher_digest: &str,
) -> serde_json::Value {
    serde_json::json!({
        "kind": "model",
        "mode": cfg.mode,
        "arch": cfg.arch,
        "category": category,
        "seed": cfg.seed,
        "image_size": cfg.image_size,
        "config_digest": cfg.digest(),
        "teacher_digest": teacher_digest,
    })
}

/// Trains every configured category, writing `<out>/<category>/checkpoint` and
/// `<out>/<category>/trajectory.json`.
pub fn train(cfg: &RunConfig) -> Result<Vec<TrainOutcome>> {
    cfg.validate()?;
    let categories = if cfg.categories.is_empty() {
        discover_categories(&cfg.dataset)?
    } else {
        cfg.categories.clone()
    };
    // Reject a missing dataset before spending time on the teacher.
    let train_sets = categories
        .iter()
        .map(|c| load_train(&cfg.dataset, c, cfg.image_size))
        .collect::<Result<Vec<_>>>()?;
    let teacher = CheckpointReader::open(&ensure_teacher(cfg)?)?;
    write_json_atomic(&cfg.out.join("config.json"), cfg)?;
    let mut outcomes = Vec::new();
    for (category, images) in categories.iter().zip(&train_sets) {
        let start = Instant::now();
        info!(
            "training {category} ({} images, mode {})",
            images.len(),
            cfg.mode
        );
        let (store, _, trajectory, teacher_digest) = train_category(cfg, &teacher, images)?;
        let dir = checkpoint_dir(&cfg.out, category);
        checkpoint::save(
            &dir,
            &store,
            |_| true,
            checkpoint_metadata(cfg, category, &teacher_digest),
        )?;
        let outcome = TrainOutcome {
            category: category.clone(),
            mode: cfg.mode,
            checkpoint: dir,
            trajectory,
            teacher_digest,
            seconds: start.elapsed().as_secs_f64(),
        };
        write_json_atomic(
            &cfg.out.join(category).join("trajectory.json"),
            &outcome.trajectory,
        )?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}
