//! Scores, AUROC with tied scores, and the category-by-scenario report with histograms.
//!
//! Usage: `cargo run --release --example auroc_report`

use fico::eval::{auroc, write_report, Report, ScenarioScores, ScoredSample};

fn samples(scenario: &str, normal: &[f64], anomalous: &[f64]) -> Vec<ScoredSample> {
    let tag = |label: u8| {
        move |(i, &score): (usize, &f64)| ScoredSample {
            id: format!("{}/{i:03}", if label == 0 { "good" } else { "defect" }),
            score,
            label,
            scenario: scenario.to_string(),
        }
    };
    normal
        .iter()
        .enumerate()
        .map(tag(0))
        .chain(anomalous.iter().enumerate().map(tag(1)))
        .collect()
}

pub fn run_example() -> fico::Result<Report> {
    let out = std::env::temp_dir()
        .join("fico-examples")
        .join("auroc_report");
    let mut report = Report::new(vec!["ID".into(), "No".into()]);
    let mut all = Vec::new();
    let cases = [
        (
            "stripes",
            "ID",
            samples("ID", &[0.1, 0.2, 0.3, 0.4], &[0.35, 0.5, 0.6, 0.7]),
        ),
        (
            "stripes",
            "No",
            samples("No", &[0.3, 0.5, 0.5, 0.6], &[0.5, 0.55, 0.7, 0.4]),
        ),
        (
            "blobs",
            "ID",
            samples("ID", &[0.2, 0.2, 0.2, 0.2], &[0.2, 0.2, 0.2, 0.2]),
        ),
        (
            "blobs",
            "No",
            samples("No", &[0.1, 0.3, 0.2, 0.4], &[0.9, 0.8, 0.3, 0.6]),
        ),
    ];
    for (category, scenario, s) in cases {
        let a = auroc(&s)?;
        println!("{category:<8} {scenario}: AUROC {a:.4}");
        report.set(category, scenario, Some(a));
        all.push(ScenarioScores {
            category: category.into(),
            scenario: scenario.into(),
            samples: s,
        });
    }
    write_report(&out, &report, &all, 5)?;
    print!("{}", report.to_csv());
    println!("report files in {}", out.display());
    Ok(report)
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}
