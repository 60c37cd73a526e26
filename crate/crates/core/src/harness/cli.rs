//! Command-line interface. Exit codes: `0` success, `1` invalid input, `2` runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use super::{ablate, evaluate, run_checkpoints, train, RunConfig};
use crate::error::{FicoError, Result};
use crate::eval::Report;
use crate::io::{
    list_dirs, read_json, read_rgb, sha256_hex, write_atomic, write_dir_atomic, write_json_atomic,
};
use crate::losses::gradcheck::{gradcheck_all, GradcheckOptions};
use crate::losses::Mode;
use crate::shift::{
    corrupt, stream_seed, synth_dataset, CorruptionKind, CorruptionSpec, SynthSpec, Texture,
    SEVERITY_TABLE_VERSION,
};

pub const THREADS_ENV: &str = "FICO_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "fico",
    version,
    about = "Reverse-distillation anomaly detection under distribution shift"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic texture dataset.
    Synth(SynthArgs),
    /// Pretrain and freeze a teacher on the auxiliary texture set.
    Teacher(TeacherArgs),
    /// Train one model per category.
    Train(RunArgs),
    /// Score the configured scenarios with trained checkpoints.
    Eval(EvalArgs),
    /// Train and evaluate several modes with a shared seed.
    Ablate(AblateArgs),
    /// Write a corrupted copy of a dataset.
    Corrupt(CorruptArgs),
    /// Compare analytic and finite-difference gradients on a tiny network.
    Gradcheck(GradcheckArgs),
    /// Print (and optionally rewrite) the result table of a results.json file.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON file with the dataset settings; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated texture families.
    #[arg(long, value_delimiter = ',')]
    pub categories: Option<Vec<String>>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub test_good: Option<usize>,
    #[arg(long)]
    pub test_anomalous: Option<usize>,
    #[arg(long)]
    pub aux_per_class: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TeacherArgs {
    /// Dataset root holding the `aux/` set.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run config supplying architecture, image size and teacher training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset root (overrides the config).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Teacher checkpoint (overrides the config).
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Training run directory holding `<category>/checkpoint`; defaults to the config's `out`.
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    /// Test-time matching blend ratio (overrides the config).
    #[arg(long)]
    pub lambda: Option<f32>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated modes.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "GNL,DISCO,DISCO+DIIFI,FICO"
    )]
    pub modes: Vec<Mode>,
}

#[derive(Args, Debug)]
pub struct CorruptArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub kind: CorruptionKind,
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=5))]
    pub severity: u8,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to write the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// A results.json file.
    #[arg(long)]
    pub results: PathBuf,
    /// Directory to write results.csv into.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .try_init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return 1;
    }
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

/// Sizes the worker pool from `FICO_THREADS` when set.
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        FicoError::InvalidArgument(format!("{THREADS_ENV}={v} is not a positive integer"))
    })?;
    // A pool may already exist when embedded in a test binary; keep it.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => read_json::<RunConfig>(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = &a.out {
        cfg.out = o.clone();
    }
    if let Some(d) = &a.data {
        cfg.dataset = d.clone();
    }
    if let Some(t) = &a.teacher {
        cfg.teacher = Some(t.clone());
    }
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => {
            let mut spec = match &a.config {
                Some(p) => read_json::<SynthSpec>(p)?,
                None => SynthSpec::default(),
            };
            if let Some(c) = &a.categories {
                spec.categories = c
                    .iter()
                    .map(|s| s.parse::<Texture>())
                    .collect::<Result<_>>()?;
            }
            spec.train = a.train.unwrap_or(spec.train);
            spec.test_good = a.test_good.unwrap_or(spec.test_good);
            spec.test_anomalous = a.test_anomalous.unwrap_or(spec.test_anomalous);
            spec.aux_per_class = a.aux_per_class.unwrap_or(spec.aux_per_class);
            spec.image_size = a.size.unwrap_or(spec.image_size);
            let m = synth_dataset(&a.out, a.seed, &spec)?;
            println!("wrote {} files to {}", m.files.len(), a.out.display());
        }
        Command::Teacher(a) => {
            let mut cfg = match &a.config {
                Some(p) => read_json::<RunConfig>(p)?,
                None => RunConfig::default(),
            };
            cfg.teacher_seed = a.seed.unwrap_or(cfg.teacher_seed);
            cfg.validate()?;
            let r = super::build_teacher(
                &a.data,
                &a.out,
                cfg.teacher_seed,
                &cfg.arch,
                &cfg.teacher_training,
                cfg.image_size,
            )?;
            println!(
                "teacher: accuracy {:.3} after {} epochs, digest {}",
                r.holdout_accuracy, r.epochs, r.digest
            );
        }
        Command::Train(a) => {
            let cfg = run_config(&a)?;
            for t in train(&cfg)? {
                let last = t.trajectory.last().map_or(f64::NAN, |s| s.losses.total);
                println!(
                    "{}: {} steps, final loss {last:.5}, checkpoint {}",
                    t.category,
                    t.trajectory.len(),
                    t.checkpoint.display()
                );
            }
        }
        Command::Eval(a) => {
            let mut cfg = run_config(&a.run)?;
            if let Some(l) = a.lambda {
                cfg.lambda = Some(l);
                cfg.validate()?;
            }
            let run_dir = a.checkpoints.clone().unwrap_or_else(|| cfg.out.clone());
            let ckpts = run_checkpoints(&run_dir)?;
            let out = evaluate(&cfg, &ckpts, &cfg.out)?;
            print!("{}", out.report.to_csv());
        }
        Command::Ablate(a) => {
            let cfg = run_config(&a.run)?;
            print!("{}", ablate(&cfg, &a.modes)?.to_csv());
        }
        Command::Corrupt(a) => {
            let spec = CorruptionSpec::at_severity(a.kind, a.severity)?;
            let n = corrupt_dataset(&a.input, &a.out, &spec, a.seed)?;
            println!("corrupted {n} images into {}", a.out.display());
        }
        Command::Gradcheck(a) => {
            let reports = gradcheck_all(a.seed, &GradcheckOptions::default())?;
            for r in &reports {
                println!(
                    "{:<8} max rel err {:.3e}  unresolved {}/{}  {:.1}s  {}",
                    r.label,
                    r.max_rel_error,
                    r.unresolved,
                    r.entries,
                    r.seconds,
                    if r.passed { "ok" } else { "FAILED" }
                );
            }
            if let Some(o) = &a.out {
                write_json_atomic(o, &reports)?;
            }
            if let Some(r) = reports.iter().find(|r| !r.passed) {
                return Err(FicoError::Invariant(format!(
                    "gradient check failed for {}",
                    r.label
                )));
            }
        }
        Command::Report(a) => {
            let report = Report::from_json(&read_json(&a.results)?)?;
            let csv = report.to_csv();
            if let Some(o) = &a.out {
                write_atomic(&o.join("results.csv"), csv.as_bytes())?;
            }
            print!("{csv}");
        }
    }
    Ok(())
}

fn collect_files(root: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let dir = root.join(rel);
    for name in list_dirs(&dir)? {
        collect_files(root, &rel.join(name), out)?;
    }
    for p in crate::io::list_png(&dir)? {
        out.push(rel.join(p.file_name().expect("file name")));
    }
    Ok(())
}

/// Copies every PNG under `input` to `output`, corrupting all images except masks
/// (`*_mask.png`). Writes `manifest.json` with the corruption settings and per-file digests. Returns the number
/// of corrupted images.
pub fn corrupt_dataset(
    input: &Path,
    output: &Path,
    spec: &CorruptionSpec,
    seed: u64,
) -> Result<usize> {
    if !input.is_dir() {
        return Err(FicoError::io(
            input,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input directory not found"),
        ));
    }
    let mut files = Vec::new();
    collect_files(input, Path::new(""), &mut files)?;
    files.sort();
    let written: Vec<(String, Vec<u8>, bool)> = files
        .par_iter()
        .enumerate()
        .map(|(i, rel)| {
            let src = input.join(rel);
            let is_mask = rel.to_string_lossy().ends_with("_mask.png");
            let bytes = if is_mask {
                std::fs::read(&src).map_err(|e| FicoError::io(&src, e))?
            } else {
                crate::io::encode_rgb(&corrupt(
                    &read_rgb(&src)?,
                    spec,
                    stream_seed(seed, &[i as u64]),
                )?)?
            };
            Ok((rel.to_string_lossy().into_owned(), bytes, !is_mask))
        })
        .collect::<Result<_>>()?;
    let mut digests = BTreeMap::new();
    write_dir_atomic(output, |dir| {
        for (rel, bytes, _) in &written {
            write_atomic(&dir.join(rel), bytes)?;
            digests.insert(rel.clone(), sha256_hex(bytes));
        }
        write_json_atomic(
            &dir.join("manifest.json"),
            &serde_json::json!({
                "spec": spec,
                "seed": seed,
                "severity_table_version": SEVERITY_TABLE_VERSION,
                "source": input,
                "files": digests,
            }),
        )
    })?;
    Ok(written.iter().filter(|w| w.2).count())
}
