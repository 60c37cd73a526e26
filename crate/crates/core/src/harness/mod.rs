//! End-to-end runs: configuration, datasets, training, evaluation, ablation and the CLI.

mod bench;
pub mod cli;
mod config;
mod dataset;
mod evaluate;
mod train;

pub use bench::{desk_benchmark, BenchConfig, BenchReport, BenchSeed, BenchSummary};
pub use config::{
    default_lambda, RunConfig, ScenarioConfig, ScenarioCorruption, DEFAULT_LAMBDA, SCHEMA_VERSION,
};
pub use dataset::{discover_categories, load_aux, load_test, load_train, TestImage, GOOD};
pub use evaluate::{evaluate, run_checkpoints, scenario_images, EvalOutcome, InferenceModel};
pub use train::{
    build_teacher, checkpoint_dir, checkpoint_metadata, components, ensure_teacher, init_network,
    train, train_category, StepRecord, TrainOutcome, DIIFI_PREFIX, TEACHER_PREFIX,
};

use std::collections::BTreeMap;
use std::path::PathBuf;

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{FicoError, Result};
use crate::io::{write_atomic, write_json_atomic};
use crate::losses::Mode;

/// Directory name of a mode inside an ablation run.
pub fn mode_slug(mode: Mode) -> String {
    mode.as_str().to_ascii_lowercase().replace('+', "_")
}

/// Trains then evaluates one configuration; the report lands in `cfg.out`.
pub fn run(cfg: &RunConfig) -> Result<(Vec<TrainOutcome>, EvalOutcome)> {
    let trained = train(cfg)?;
    let ckpts: Vec<(String, PathBuf)> = trained
        .iter()
        .map(|t| (t.category.clone(), t.checkpoint.clone()))
        .collect();
    let eval = evaluate(cfg, &ckpts, &cfg.out)?;
    Ok((trained, eval))
}

/// One ablation row: mean AUROC over categories per scenario for one mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub seed: u64,
    pub scenarios: BTreeMap<String, Option<f64>>,
    /// Mean over the non-ID scenarios.
    pub ood_mean: Option<f64>,
    /// Mean over all scenarios.
    pub average: Option<f64>,
    /// Loss components recorded in the training trajectory.
    pub trace: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
    /// Whether the average strictly increases from row to row.
    pub monotone: bool,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "null".to_string(), |x| x.to_string());
        let mut out = format!("mode,seed,{},OOD,Avg\n", self.columns.join(","));
        for r in &self.rows {
            let cells: Vec<String> = self
                .columns
                .iter()
                .map(|c| cell(r.scenarios.get(c).copied().flatten()))
                .collect();
            out += &format!(
                "{},{},{},{},{}\n",
                r.mode,
                r.seed,
                cells.join(","),
                cell(r.ood_mean),
                cell(r.average)
            );
        }
        out
    }
}

/// Runs each mode with the same seed and dataset under `cfg.out/<mode>` and stacks the results.
/// Writes `ablation.json` and `ablation.csv` to `cfg.out`.
pub fn ablate(cfg: &RunConfig, modes: &[Mode]) -> Result<AblationReport> {
    if modes.is_empty() {
        return Err(FicoError::InvalidArgument("no modes to compare".into()));
    }
    if let Some(m) = modes.iter().find(|m| !Mode::ABLATION.contains(m)) {
        return Err(FicoError::InvalidArgument(format!(
            "mode {m} is not part of the ablation ladder (GNL, DISCO, DISCO+DIIFI, FICO)"
        )));
    }
    cfg.validate()?;
    let teacher = ensure_teacher(cfg)?;
    let columns: Vec<String> = cfg.scenarios.iter().map(|s| s.name.clone()).collect();
    let ood: Vec<&str> = columns
        .iter()
        .map(String::as_str)
        .filter(|c| *c != "ID")
        .collect();
    let all: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut rows = Vec::new();
    for &mode in modes {
        let sub = RunConfig {
            mode,
            teacher: Some(teacher.clone()),
            out: cfg.out.join(mode_slug(mode)),
            ..cfg.clone()
        };
        let (trained, eval) = run(&sub)?;
        let trace = trained
            .first()
            .map(|t| t.trace_components().into_iter().map(String::from).collect())
            .unwrap_or_default();
        let scenarios = columns
            .iter()
            .map(|c| (c.clone(), eval.report.column_average(c)))
            .collect();
        let row = AblationRow {
            mode,
            seed: cfg.seed,
            scenarios,
            ood_mean: eval.mean_over(&ood),
            average: eval.mean_over(&all),
            trace,
        };
        info!("ablation {mode}: average {:?}", row.average);
        rows.push(row);
    }
    let monotone = rows
        .windows(2)
        .all(|w| matches!((w[0].average, w[1].average), (Some(a), Some(b)) if b > a));
    info!("ablation rows strictly increasing: {monotone}");
    let report = AblationReport {
        columns,
        rows,
        monotone,
    };
    write_json_atomic(&cfg.out.join("ablation.json"), &report)?;
    write_atomic(&cfg.out.join("ablation.csv"), report.to_csv().as_bytes())?;
    Ok(report)
}
