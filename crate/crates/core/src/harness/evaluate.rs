//! Scoring test scenarios with trained checkpoints.
//!
//! Inference rebuilds the network without the filter chain and loads only the tensors that
//! network owns, so `diifi.*` entries are never read even when the checkpoint holds them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, ScenarioConfig};
use super::dataset::{load_test, load_train, TestImage};
use super::train::{checkpoint_dir, DIIFI_PREFIX};
use crate::checkpoint::{load_into, CheckpointReader};
use crate::error::{FicoError, Result};
use crate::eval::{
    anomaly_map, image_score, write_heatmap, write_report, AnomalyMap, Report, ScenarioScores,
    ScoredSample,
};
use crate::losses::Mode;
use crate::model::{ArchConfig, Components, FeaturePyramid, RdNetwork};
use crate::nn::{Ctx, ParamStore};
use crate::shift::{corrupt, stream_seed, tta_adapt, CorruptionKind, CorruptionSpec, StyleBank};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 16;

/// A network ready for scoring, rebuilt from a checkpoint.
pub struct InferenceModel {
    pub net: RdNetwork,
    pub store: ParamStore<f32>,
    pub mode: Mode,
    /// Tensor names read from the checkpoint, in order.
    pub reads: Vec<String>,
}

impl InferenceModel {
    pub fn load(dir: &Path) -> Result<Self> {
        let reader = CheckpointReader::open(dir)?;
        let meta = reader.metadata();
        let field = |k: &str| {
            meta.get(k).cloned().ok_or_else(|| {
                FicoError::Checkpoint(format!("{}: metadata lacks `{k}`", dir.display()))
            })
        };
        let mode: Mode = serde_json::from_value(field("mode")?)?;
        let arch: ArchConfig = serde_json::from_value(field("arch")?)?;
        let mut store = ParamStore::new();
        let components = Components {
            disco: mode.uses_disco(),
            diifi: false,
        };
        let net = RdNetwork::new(&mut store, &arch, components, 0)?;
        load_into(&reader, &mut store, |_| true)?;
        let reads = reader.access_log();
        if let Some(n) = reads.iter().find(|n| n.starts_with(DIIFI_PREFIX)) {
            return Err(FicoError::Invariant(format!(
                "inference read filter weight {n}"
            )));
        }
        Ok(InferenceModel {
            net,
            store,
            mode,
            reads,
        })
    }

    /// Teacher pyramid of a `[B, 3, H, W]` batch.
    pub fn encode(&self, images: &Tensor<f32>) -> Result<FeaturePyramid<f32>> {
        self.net.encode(&self.store, images)
    }

    /// Student features used for scoring (compensated when the mode has compensation modules)
    /// for a given teacher pyramid.
    pub fn student_for(&self, teacher: &FeaturePyramid<f32>) -> Result<FeaturePyramid<f32>> {
        let mut cx = Ctx::new(&self.store, false);
        let vars = teacher
            .levels()
            .iter()
            .map(|t| cx.input(t.clone()))
            .collect();
        let out = self.net.forward_from_teacher(&mut cx, vars, false)?;
        FeaturePyramid::new(out.scored().iter().map(|&v| cx.value(v).clone()).collect())
    }

    pub fn style_bank(&self, train: &[Tensor<f32>], lambda: f32) -> Result<StyleBank> {
        let mut feats = Vec::new();
        for chunk in train.chunks(EVAL_BATCH) {
            let x = Tensor::stack(&chunk.iter().collect::<Vec<_>>())?;
            feats.push(self.encode(&x)?.into_levels().swap_remove(0));
        }
        StyleBank::from_features(&feats.iter().collect::<Vec<_>>(), lambda)
    }

    /// Anomaly maps of a list of images, optionally after test-time feature matching.
    pub fn maps(
        &self,
        images: &[&Tensor<f32>],
        bank: Option<&StyleBank>,
        sigma: f64,
    ) -> Result<Vec<AnomalyMap>> {
        let chunks: Vec<Vec<AnomalyMap>> = images
            .par_chunks(EVAL_BATCH)
            .map(|chunk| {
                let x = Tensor::stack(chunk)?;
                let (_, _, h, w) = x.dims4()?;
                let mut teacher = self.encode(&x)?;
                if let Some(b) = bank {
                    teacher = tta_adapt(&self.net.teacher, &self.store, &teacher, b)?;
                }
                let student = self.student_for(&teacher)?;
                anomaly_map(&teacher, &student, h, w, sigma)
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }
}

/// Test images of a scenario: read from its own root or the run dataset, then corrupted in
/// memory when the scenario names a corruption. The noise stream depends only on the
/// scenario's corruption and the image position, so every run sees the same test set.
pub fn scenario_images(
    cfg: &RunConfig,
    scenario: &ScenarioConfig,
    category: &str,
) -> Result<Vec<TestImage>> {
    let root = scenario.root.as_deref().unwrap_or(&cfg.dataset);
    let mut images = load_test(root, category, cfg.image_size)?;
    if let Some(c) = scenario.corruption {
        let spec = CorruptionSpec::at_severity(c.kind, c.severity)?;
        let kind_index = CorruptionKind::ALL
            .iter()
            .position(|&k| k == c.kind)
            .unwrap_or(0) as u64;
        images = images
            .into_par_iter()
            .enumerate()
            .map(|(i, mut t)| {
                let seed = stream_seed(
                    cfg.corruption_seed,
                    &[kind_index, c.severity as u64, i as u64],
                );
                t.image = corrupt(&t.image, &spec, seed)?;
                Ok(t)
            })
            .collect::<Result<_>>()?;
    }
    Ok(images)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub report: Report,
    pub scores: Vec<ScenarioScores>,
    /// Checkpoint tensors read per category.
    pub reads: BTreeMap<String, Vec<String>>,
}

impl EvalOutcome {
    /// Mean over categories of the mean AUROC of the named scenarios.
    pub fn mean_over(&self, scenarios: &[&str]) -> Option<f64> {
        let rows: Vec<f64> = self
            .report
            .rows
            .keys()
            .filter_map(|c| self.report.row_mean(c, scenarios))
            .collect();
        (!rows.is_empty()).then(|| rows.iter().sum::<f64>() / rows.len() as f64)
    }
}

/// Scores every configured scenario for every `(category, checkpoint)` pair and writes the
/// report files under `out`.
pub fn evaluate(
    cfg: &RunConfig,
    checkpoints: &[(String, PathBuf)],
    out: &Path,
) -> Result<EvalOutcome> {
    cfg.validate()?;
    let columns = cfg.scenarios.iter().map(|s| s.name.clone()).collect();
    let mut report = Report::new(columns);
    let mut all_scores = Vec::new();
    let mut reads = BTreeMap::new();
    for (category, dir) in checkpoints {
        let model = InferenceModel::load(dir)?;
        let lambda = cfg.lambda_for(model.mode);
        let bank = if lambda > 0.0 {
            Some(model.style_bank(&load_train(&cfg.dataset, category, cfg.image_size)?, lambda)?)
        } else {
            None
        };
        for scenario in &cfg.scenarios {
            let tests = scenario_images(cfg, scenario, category)?;
            let images: Vec<&Tensor<f32>> = tests.iter().map(|t| &t.image).collect();
            let maps = model.maps(&images, bank.as_ref(), cfg.smooth_sigma)?;
            let mut samples = Vec::with_capacity(tests.len());
            for (t, m) in tests.iter().zip(&maps) {
                samples.push(ScoredSample {
                    id: t.id.clone(),
                    score: image_score(m, cfg.score_rule)?,
                    label: t.label,
                    scenario: scenario.name.clone(),
                });
            }
            let auc = match crate::eval::auroc(&samples) {
                Ok(a) => Some(a),
                Err(FicoError::UndefinedMetric(msg)) => {
                    log::warn!("{category}/{}: {msg}", scenario.name);
                    None
                }
                Err(e) => return Err(e),
            };
            info!(
                "{category} {} [{}]: AUROC {}",
                scenario.name,
                model.mode,
                auc.map_or("null".into(), |a| format!("{a:.4}"))
            );
            report.set(category, &scenario.name, auc);
            for (t, m) in tests.iter().zip(&maps).take(cfg.heatmaps) {
                let file = format!("{category}_{}.png", t.id.replace('/', "_"));
                write_heatmap(
                    &out.join("maps").join(&scenario.name).join(file),
                    m,
                    model.net.arch.levels,
                )?;
            }
            all_scores.push(ScenarioScores {
                category: category.clone(),
                scenario: scenario.name.clone(),
                samples,
            });
        }
        reads.insert(category.clone(), model.reads);
    }
    write_report(out, &report, &all_scores, cfg.histogram_bins)?;
    Ok(EvalOutcome {
        report,
        scores: all_scores,
        reads,
    })
}

/// `(category, checkpoint)` pairs of a training run directory.
pub fn run_checkpoints(run: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for cat in crate::io::list_dirs(run)? {
        let dir = checkpoint_dir(run, &cat);
        if dir.join(crate::checkpoint::MANIFEST_FILE).exists() {
            out.push((cat, dir));
        }
    }
    if out.is_empty() {
        return Err(FicoError::io(
            run,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "no trained checkpoints in run directory",
            ),
        ));
    }
    Ok(out)
}
