//! Trains the frozen teacher on the auxiliary texture-classification set and reloads it.
//!
//! Usage: `cargo run --release --example teacher_pretraining`

use fico::checkpoint::CheckpointReader;
use fico::harness::build_teacher;
use fico::model::{ArchConfig, TeacherConfig, TeacherReport};
use fico::shift::{synth_dataset, SynthSpec, Texture};

pub fn run_example() -> fico::Result<TeacherReport> {
    let root = std::env::temp_dir()
        .join("fico-examples")
        .join("teacher_pretraining");
    let spec = SynthSpec {
        categories: vec![Texture::Stripes],
        train: 1,
        test_good: 1,
        test_anomalous: 1,
        aux_per_class: 24,
        image_size: 32,
        ..SynthSpec::default()
    };
    synth_dataset(&root.join("data"), 0, &spec)?;
    let tcfg = TeacherConfig {
        max_epochs: 8,
        ..TeacherConfig::default()
    };
    let report = build_teacher(
        &root.join("data"),
        &root.join("teacher"),
        0,
        &ArchConfig::default(),
        &tcfg,
        32,
    )?;
    let reader = CheckpointReader::open(&root.join("teacher"))?;
    println!(
        "teacher: {} epochs, held-out accuracy {:.3}, {} tensors, digest {}",
        report.epochs,
        report.holdout_accuracy,
        reader.names().count(),
        &report.digest[..16]
    );
    Ok(report)
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}
