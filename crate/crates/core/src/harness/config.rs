//! Run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FicoError, Result};
use crate::eval::ScoreRule;
use crate::io::{read_json, sha256_hex};
use crate::losses::{LossWeights, Mode};
use crate::model::{ArchConfig, TeacherConfig};
use crate::nn::AdamConfig;
use crate::shift::{AugmentPolicy, CorruptionKind};

pub const SCHEMA_VERSION: u32 = 1;

/// Test-time matching ratio of the methods that include it.
pub const DEFAULT_LAMBDA: f32 = 0.8;

/// Test-time matching is part of the consistency-trained methods; plain reverse distillation
/// is scored without it.
pub fn default_lambda(mode: Mode) -> f32 {
    match mode {
        Mode::Rd => 0.0,
        _ => DEFAULT_LAMBDA,
    }
}

/// One evaluation scenario.
///
/// The test split comes from `root` when given, otherwise from the run's dataset. A
/// `corruption` is applied in memory to every test image of that split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default)]
    pub corruption: Option<ScenarioCorruption>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioCorruption {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl ScenarioConfig {
    pub fn id() -> Self {
        ScenarioConfig {
            name: "ID".into(),
            root: None,
            corruption: None,
        }
    }

    pub fn corrupted(kind: CorruptionKind, severity: u8) -> Self {
        ScenarioConfig {
            name: kind.short().into(),
            root: None,
            corruption: Some(ScenarioCorruption { kind, severity }),
        }
    }

    /// In-distribution test set plus the four corruption families at `severity`.
    pub fn standard(severity: u8) -> Vec<Self> {
        std::iter::once(Self::id())
            .chain(
                CorruptionKind::ALL
                    .iter()
                    .map(|&k| Self::corrupted(k, severity)),
            )
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub weights: LossWeights,
    pub arch: ArchConfig,
    /// View count `N` and augmentation ranges. The policy seed is mixed with the run seed.
    pub augment: AugmentPolicy,
    pub image_size: usize,
    /// Dataset root in the category / split layout.
    pub dataset: PathBuf,
    /// Categories to use; empty means every category found under `dataset`.
    pub categories: Vec<String>,
    /// Teacher checkpoint; built from the dataset's auxiliary set when absent.
    pub teacher: Option<PathBuf>,
    pub teacher_seed: u64,
    pub teacher_training: TeacherConfig,
    pub scenarios: Vec<ScenarioConfig>,
    /// Seed of the in-memory corruption noise; independent of `seed` so runs share test sets.
    pub corruption_seed: u64,
    /// Test-time feature-matching blend ratio; `0` disables it. When absent each checkpoint
    /// uses its mode's default (see [`default_lambda`]).
    pub lambda: Option<f32>,
    /// Anomaly-map smoothing in pixels.
    pub smooth_sigma: f64,
    pub score_rule: ScoreRule,
    /// Heatmap PNGs written per category and scenario.
    pub heatmaps: usize,
    pub histogram_bins: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            mode: Mode::Fico,
            epochs: 20,
            batch_size: 8,
            optimizer: AdamConfig::default(),
            weights: LossWeights::default(),
            arch: ArchConfig::default(),
            augment: AugmentPolicy::default(),
            image_size: 64,
            dataset: PathBuf::from("data"),
            categories: Vec::new(),
            teacher: None,
            teacher_seed: 0,
            teacher_training: TeacherConfig::default(),
            scenarios: ScenarioConfig::standard(3),
            corruption_seed: 0,
            lambda: None,
            smooth_sigma: 4.0,
            score_rule: ScoreRule::Max,
            heatmaps: 4,
            histogram_bins: 20,
            out: PathBuf::from("runs/fico"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(FicoError::InvalidArgument(m));
        if self.schema_version != SCHEMA_VERSION {
            return invalid(format!(
                "config schema {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        self.arch.validate()?;
        self.weights.validate()?;
        self.augment.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return invalid("epochs and batch size must be positive".into());
        }
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr > 0.0) {
            return invalid(format!("learning rate {}", self.optimizer.lr));
        }
        let div = self.arch.input_divisor();
        if self.image_size == 0 || !self.image_size.is_multiple_of(div) {
            return invalid(format!(
                "image size {} must be a positive multiple of {div}",
                self.image_size
            ));
        }
        if let Some(l) = self.lambda.filter(|l| !(0.0..=1.0).contains(l)) {
            return invalid(format!("lambda {l} outside [0, 1]"));
        }
        if !(self.smooth_sigma.is_finite() && self.smooth_sigma >= 0.0) {
            return invalid(format!("smoothing sigma {}", self.smooth_sigma));
        }
        if self.scenarios.is_empty() {
            return invalid("at least one scenario is required".into());
        }
        for (i, s) in self.scenarios.iter().enumerate() {
            if self.scenarios[..i].iter().any(|o| o.name == s.name) {
                return invalid(format!("duplicate scenario {}", s.name));
            }
            if let Some(c) = s.corruption {
                crate::shift::CorruptionSpec::at_severity(c.kind, c.severity)?;
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    /// Matching ratio applied to checkpoints of `mode`.
    pub fn lambda_for(&self, mode: Mode) -> f32 {
        self.lambda.unwrap_or_else(|| default_lambda(mode))
    }

    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig {
            seed: 9,
            mode: Mode::DiscoDiifi,
            lambda: Some(0.25),
            ..Default::default()
        };
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        assert!(text.contains("\"DISCO+DIIFI\""));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"epochs": 3, "epoch": 4}"#).is_err());
        assert!(
            serde_json::from_str::<RunConfig>(r#"{"weights": {"alpha": 1, "delta": 2}}"#).is_err()
        );
        let partial: RunConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(partial.batch_size, 8);
    }

    #[test]
    fn defaults_match_the_documented_values() {
        let c = RunConfig::default();
        assert_eq!(
            (c.optimizer.lr, c.epochs, c.batch_size, c.image_size),
            (0.005, 20, 8, 64)
        );
        assert_eq!(
            (c.weights.alpha, c.weights.beta, c.weights.gamma),
            (0.05, 0.02, 1.0)
        );
        assert_eq!(
            (c.arch.disco_blocks, c.arch.levels, c.augment.views),
            (4, 3, 2)
        );
        assert_eq!(
            (
                c.lambda_for(Mode::Fico),
                c.lambda_for(Mode::Gnl),
                c.lambda_for(Mode::Rd)
            ),
            (0.8, 0.8, 0.0)
        );
        assert_eq!(
            RunConfig {
                lambda: Some(0.3),
                ..c.clone()
            }
            .lambda_for(Mode::Rd),
            0.3
        );
        assert_eq!(c.scenarios.len(), 5);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_values_are_rejected() {
        for cfg in [
            RunConfig {
                image_size: 60,
                ..Default::default()
            },
            RunConfig {
                lambda: Some(1.5),
                ..Default::default()
            },
            RunConfig {
                epochs: 0,
                ..Default::default()
            },
            RunConfig {
                schema_version: 0,
                ..Default::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
