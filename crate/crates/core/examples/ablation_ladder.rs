//! Runs the four-step ablation ladder (GNL, DISCO, DISCO+DIIFI, FICO) on a small dataset
//! with a shared teacher.
//!
//! Usage: `cargo run --release --example ablation_ladder`

use fico::harness::{ablate, AblationReport, RunConfig};
use fico::losses::Mode;
use fico::shift::{synth_dataset, SynthSpec, Texture};

pub fn run_example() -> fico::Result<AblationReport> {
    let root = std::env::temp_dir()
        .join("fico-examples")
        .join("ablation_ladder");
    let spec = SynthSpec {
        categories: vec![Texture::NoiseCloth],
        train: 8,
        test_good: 6,
        test_anomalous: 6,
        aux_per_class: 12,
        image_size: 32,
        ..SynthSpec::default()
    };
    synth_dataset(&root.join("data"), 0, &spec)?;
    let cfg = RunConfig {
        epochs: 2,
        image_size: 32,
        dataset: root.join("data"),
        out: root.join("ablation"),
        heatmaps: 0,
        ..RunConfig::default()
    };
    let report = ablate(&cfg, &Mode::ABLATION)?;
    print!("{}", report.to_csv());
    for row in &report.rows {
        println!("{:<12} trains {}", row.mode.as_str(), row.trace.join(", "));
    }
    println!("strictly increasing: {}", report.monotone);
    Ok(report)
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}
