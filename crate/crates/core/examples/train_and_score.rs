//! Trains FICO on a small synthetic dataset, then scores the clean and corrupted test sets.
//! Writes checkpoints, trajectories, the AUROC table, score histograms and heatmaps.
//!
//! Usage: `cargo run --release --example train_and_score`

use fico::harness::{run, EvalOutcome, RunConfig};
use fico::losses::Mode;
use fico::shift::{synth_dataset, SynthSpec, Texture};

pub fn run_example() -> fico::Result<EvalOutcome> {
    let root = std::env::temp_dir()
        .join("fico-examples")
        .join("train_and_score");
    let spec = SynthSpec {
        categories: vec![Texture::Stripes],
        train: 16,
        test_good: 8,
        test_anomalous: 8,
        aux_per_class: 16,
        image_size: 32,
        ..SynthSpec::default()
    };
    synth_dataset(&root.join("data"), 0, &spec)?;
    let cfg = RunConfig {
        mode: Mode::Fico,
        epochs: 4,
        image_size: 32,
        dataset: root.join("data"),
        out: root.join("run"),
        ..RunConfig::default()
    };
    let (trained, eval) = run(&cfg)?;
    for t in &trained {
        let last = t.trajectory.last().map_or(f64::NAN, |s| s.losses.total);
        println!(
            "{}: {} steps, final loss {last:.4}, {:.1} s",
            t.category,
            t.trajectory.len(),
            t.seconds
        );
    }
    print!("{}", eval.report.to_csv());
    println!("outputs in {}", cfg.out.display());
    Ok(eval)
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}
