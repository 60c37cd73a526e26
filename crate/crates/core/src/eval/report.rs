//! Result tables, score histograms and heatmap images.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnomalyMap, ScoredSample};
use crate::error::{FicoError, Result};
use crate::io::{encode_gray, write_atomic, write_json_atomic};

pub const AVG_COLUMN: &str = "Avg";
pub const AVERAGE_ROW: &str = "Average";

/// All scored samples of one scenario for one category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScores {
    pub category: String,
    pub scenario: String,
    pub samples: Vec<ScoredSample>,
}

/// AUROC per category (rows) and scenario (columns). Missing cells are `None` and are written
/// as `null`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub columns: Vec<String>,
    pub rows: BTreeMap<String, BTreeMap<String, Option<f64>>>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n > 0).then(|| s / n as f64)
}

impl Report {
    pub fn new(columns: Vec<String>) -> Self {
        Report {
            columns,
            rows: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, category: &str, scenario: &str, value: Option<f64>) {
        if !self.columns.iter().any(|c| c == scenario) {
            self.columns.push(scenario.to_string());
        }
        self.rows
            .entry(category.to_string())
            .or_default()
            .insert(scenario.to_string(), value);
    }

    pub fn get(&self, category: &str, scenario: &str) -> Option<f64> {
        self.rows.get(category)?.get(scenario).copied().flatten()
    }

    /// Mean over the present cells of a category row restricted to `columns`.
    pub fn row_mean(&self, category: &str, columns: &[&str]) -> Option<f64> {
        mean(columns.iter().filter_map(|c| self.get(category, c)))
    }

    /// Mean over the present cells of a category row.
    pub fn row_average(&self, category: &str) -> Option<f64> {
        let cols: Vec<&str> = self.columns.iter().map(String::as_str).collect();
        self.row_mean(category, &cols)
    }

    /// Mean over categories of one column.
    pub fn column_average(&self, scenario: &str) -> Option<f64> {
        mean(self.rows.keys().filter_map(|cat| self.get(cat, scenario)))
    }

    /// `{category -> {scenario -> auroc | null}}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.rows
                .iter()
                .map(|(cat, row)| {
                    let cells = self
                        .columns
                        .iter()
                        .map(|c| (c.clone(), row.get(c).copied().flatten().into()))
                        .collect();
                    (cat.clone(), serde_json::Value::Object(cells))
                })
                .collect(),
        )
    }

    /// Rebuilds a report from [`Report::to_json`] output; column order follows the first row.
    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let bad = || {
            FicoError::InvalidArgument(
                "results must map category -> scenario -> number or null".into(),
            )
        };
        let obj = value.as_object().ok_or_else(bad)?;
        let mut report = Report::default();
        for (cat, row) in obj {
            for (scenario, v) in row.as_object().ok_or_else(bad)? {
                let cell = match v {
                    serde_json::Value::Null => None,
                    v => Some(v.as_f64().ok_or_else(bad)?),
                };
                report.set(cat, scenario, cell);
            }
        }
        Ok(report)
    }

    /// Header `category,<scenarios...>,Avg`, one row per category and a final average row.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "null".to_string(), |x| x.to_string());
        let mut out = format!("category,{},{AVG_COLUMN}\n", self.columns.join(","));
        for cat in self.rows.keys() {
            let cells: Vec<String> = self
                .columns
                .iter()
                .map(|c| cell(self.get(cat, c)))
                .collect();
            out += &format!(
                "{cat},{},{}\n",
                cells.join(","),
                cell(self.row_average(cat))
            );
        }
        let avgs: Vec<Option<f64>> = self
            .columns
            .iter()
            .map(|c| self.column_average(c))
            .collect();
        let overall = mean(self.rows.keys().filter_map(|c| self.row_average(c)));
        let cells: Vec<String> = avgs.into_iter().map(cell).collect();
        out += &format!("{AVERAGE_ROW},{},{}\n", cells.join(","), cell(overall));
        out
    }
}

/// Score histogram of one category and scenario on shared bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub normal: Vec<usize>,
    pub anomalous: Vec<usize>,
    pub normal_scores: Vec<f64>,
    pub anomalous_scores: Vec<f64>,
}

pub fn histogram(samples: &[ScoredSample], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let (lo, hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            (lo.min(s.score), hi.max(s.score))
        });
    let (lo, hi) = if lo.is_finite() {
        (lo, if hi > lo { hi } else { lo + 1.0 })
    } else {
        (0.0, 1.0)
    };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut normal = vec![0; bins];
    let mut anomalous = vec![0; bins];
    for s in samples {
        let b = (((s.score - lo) / width) as usize).min(bins - 1);
        if s.label == 1 {
            anomalous[b] += 1;
        } else {
            normal[b] += 1;
        }
    }
    let pick = |l: u8| {
        samples
            .iter()
            .filter(|s| s.label == l)
            .map(|s| s.score)
            .collect()
    };
    Histogram {
        edges,
        normal,
        anomalous,
        normal_scores: pick(0),
        anomalous_scores: pick(1),
    }
}

/// Writes `results.json`, `results.csv`, `scores.json` (every scored sample) and
/// `hist/<scenario>.json` (one histogram per category) under `dir`.
pub fn write_report(
    dir: &Path,
    report: &Report,
    scores: &[ScenarioScores],
    bins: usize,
) -> Result<()> {
    write_json_atomic(&dir.join("results.json"), &report.to_json())?;
    write_atomic(&dir.join("results.csv"), report.to_csv().as_bytes())?;
    write_json_atomic(&dir.join("scores.json"), &scores)?;
    let mut hists: BTreeMap<&str, BTreeMap<&str, Histogram>> = BTreeMap::new();
    for s in scores {
        hists
            .entry(&s.scenario)
            .or_default()
            .insert(&s.category, histogram(&s.samples, bins));
    }
    for (scenario, h) in hists {
        write_json_atomic(&dir.join("hist").join(format!("{scenario}.json")), &h)?;
    }
    Ok(())
}

/// Saves a map as 8-bit grayscale after dividing by `2 * levels`, the largest possible value.
pub fn write_heatmap(path: &Path, map: &AnomalyMap, levels: usize) -> Result<()> {
    let scale = 1.0 / (2.0 * levels.max(1) as f32);
    let v: Vec<f32> = map.values.iter().map(|x| x * scale).collect();
    write_atomic(path, &encode_gray(&v, map.h, map.w)?)
}
