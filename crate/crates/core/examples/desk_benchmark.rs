//! Full desk-scale benchmark: synthetic data, teacher, ablation ladder and plain reverse
//! distillation over three seeds. Takes roughly twenty minutes on one CPU core.
//!
//! Usage: `cargo run --release --example desk_benchmark -- [output dir]`

use std::path::PathBuf;

use fico::harness::{desk_benchmark, BenchConfig, BenchReport};

pub fn run_example() -> fico::Result<BenchReport> {
    let root = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs/desk_benchmark"));
    let report = desk_benchmark(&root, &BenchConfig::default())?;
    for seed in &report.seeds {
        print!("{}", seed.ablation.to_csv());
        println!("RD,{},ID {:?},OOD {:?}", seed.seed, seed.rd_id, seed.rd_ood);
    }
    println!("{}", serde_json::to_string_pretty(&report.summary)?);
    println!(
        "teacher accuracy {:.3}, {:.0} s, report in {}",
        report.teacher_accuracy,
        report.seconds,
        root.join("bench.json").display()
    );
    Ok(report)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}
