//! The desk-scale benchmark: one synthetic dataset, one teacher, several seeds, the four
//! ablation modes plus plain reverse distillation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, DEFAULT_LAMBDA};
use super::evaluate::evaluate;
use super::train::build_teacher;
use super::{ablate, run, AblationReport};
use crate::error::{FicoError, Result};
use crate::io::write_json_atomic;
use crate::losses::Mode;
use crate::shift::{synth_dataset, SynthSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub seeds: Vec<u64>,
    pub synth_seed: u64,
    pub synth: SynthSpec,
    /// Base run settings; `seed`, `mode`, `dataset`, `teacher` and `out` are set per run.
    pub run: RunConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seeds: vec![0, 1, 2],
            synth_seed: 0,
            synth: SynthSpec {
                train: 64,
                aux_per_class: 96,
                ..SynthSpec::default()
            },
            run: RunConfig::default(),
        }
    }
}

/// Results of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSeed {
    pub seed: u64,
    pub ablation: AblationReport,
    pub rd_id: Option<f64>,
    pub rd_ood: Option<f64>,
    /// Plain reverse distillation scored with test-time matching at the default ratio.
    pub rd_matched_ood: Option<f64>,
}

/// Seed means of the quantities the directional claims are about.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub fico_id: f64,
    pub fico_ood: f64,
    pub gnl_ood: f64,
    pub rd_ood: f64,
    pub rd_matched_ood: f64,
    pub fico_id_at_least_0_90: bool,
    pub fico_ood_within_0_01_of_gnl: bool,
    pub fico_ood_at_least_rd: bool,
    pub all_ablation_rows: bool,
    pub ablation_monotone_seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub teacher_accuracy: f64,
    pub seeds: Vec<BenchSeed>,
    pub summary: BenchSummary,
    pub seconds: f64,
}

fn mean(values: impl IntoIterator<Item = Option<f64>>) -> Result<f64> {
    let v: Vec<f64> = values
        .into_iter()
        .collect::<Option<_>>()
        .ok_or_else(|| FicoError::UndefinedMetric("a benchmark cell has no AUROC".into()))?;
    if v.is_empty() {
        return Err(FicoError::UndefinedMetric("no benchmark seeds".into()));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

fn row(report: &AblationReport, mode: Mode) -> Option<&super::AblationRow> {
    report.rows.iter().find(|r| r.mode == mode)
}

/// Runs the benchmark under `root` and writes `root/bench.json`.
pub fn desk_benchmark(root: &Path, cfg: &BenchConfig) -> Result<BenchReport> {
    let start = Instant::now();
    let data = root.join("data");
    synth_dataset(&data, cfg.synth_seed, &cfg.synth)?;
    let base = RunConfig {
        dataset: data.clone(),
        image_size: cfg.synth.image_size,
        ..cfg.run.clone()
    };
    base.validate()?;
    let teacher: PathBuf = root.join("teacher");
    let t = build_teacher(
        &data,
        &teacher,
        base.teacher_seed,
        &base.arch,
        &base.teacher_training,
        base.image_size,
    )?;

    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let out = root.join(format!("seed_{seed}"));
        let cfg_seed = RunConfig {
            seed,
            teacher: Some(teacher.clone()),
            out: out.clone(),
            ..base.clone()
        };
        let ablation = ablate(&cfg_seed, &Mode::ABLATION)?;
        let rd_cfg = RunConfig {
            mode: Mode::Rd,
            out: out.join("rd"),
            ..cfg_seed.clone()
        };
        let (trained, rd) = run(&rd_cfg)?;
        let matched_cfg = RunConfig {
            lambda: Some(DEFAULT_LAMBDA),
            ..rd_cfg.clone()
        };
        let ckpts: Vec<(String, PathBuf)> = trained
            .iter()
            .map(|t| (t.category.clone(), t.checkpoint.clone()))
            .collect();
        let matched = evaluate(&matched_cfg, &ckpts, &out.join("rd_matched"))?;
        let ood: Vec<&str> = base
            .scenarios
            .iter()
            .map(|s| s.name.as_str())
            .filter(|n| *n != "ID")
            .collect();
        let entry = BenchSeed {
            seed,
            rd_id: rd.mean_over(&["ID"]),
            rd_ood: rd.mean_over(&ood),
            rd_matched_ood: matched.mean_over(&ood),
            ablation,
        };
        info!(
            "seed {seed}: RD OOD {:?}, RD with matching OOD {:?}",
            entry.rd_ood, entry.rd_matched_ood
        );
        seeds.push(entry);
    }

    let id_of = |m: Mode| {
        seeds.iter().map(move |s| {
            row(&s.ablation, m).and_then(|r| r.scenarios.get("ID").copied().flatten())
        })
    };
    let ood_of = |m: Mode| {
        seeds
            .iter()
            .map(move |s| row(&s.ablation, m).and_then(|r| r.ood_mean))
    };
    let fico_id = mean(id_of(Mode::Fico))?;
    let fico_ood = mean(ood_of(Mode::Fico))?;
    let gnl_ood = mean(ood_of(Mode::Gnl))?;
    let rd_ood = mean(seeds.iter().map(|s| s.rd_ood))?;
    let rd_matched_ood = mean(seeds.iter().map(|s| s.rd_matched_ood))?;
    let summary = BenchSummary {
        fico_id,
        fico_ood,
        gnl_ood,
        rd_ood,
        rd_matched_ood,
        fico_id_at_least_0_90: fico_id >= 0.90,
        fico_ood_within_0_01_of_gnl: fico_ood >= gnl_ood - 0.01,
        fico_ood_at_least_rd: fico_ood >= rd_ood,
        all_ablation_rows: seeds.iter().all(|s| {
            Mode::ABLATION
                .iter()
                .all(|&m| row(&s.ablation, m).is_some())
        }),
        ablation_monotone_seeds: seeds.iter().filter(|s| s.ablation.monotone).count(),
    };
    let report = BenchReport {
        config: cfg.clone(),
        teacher_accuracy: t.holdout_accuracy,
        seeds,
        summary,
        seconds: start.elapsed().as_secs_f64(),
    };
    write_json_atomic(&root.join("bench.json"), &report)?;
    Ok(report)
}
