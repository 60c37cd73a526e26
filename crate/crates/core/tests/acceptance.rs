//! Acceptance runner: prints one PASS/FAIL line per criterion and exits non-zero when any
//! fails. Criterion numbers given as arguments select a subset, e.g.
//! `cargo test --test acceptance -- 1 5`.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use fico::checkpoint::{copy_without_prefix, CheckpointReader};
use fico::harness::{
    checkpoint_dir, desk_benchmark, evaluate, run, BenchConfig, RunConfig, DIIFI_PREFIX,
};
use fico::io::file_digest;
use fico::losses::gradcheck::{gradcheck_all, GradcheckOptions};
use fico::losses::Mode;
use fico::model::TeacherConfig;
use fico::shift::{
    corrupt, disk_kernel, efdm_match, synth_dataset, CorruptionKind, CorruptionSpec, SynthSpec,
    Texture, SEVERITY_TABLE_VERSION,
};
use fico::Tensor;
use proptest::strategy::Strategy;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Runs `cases` generated trials through `check` with a fixed generator seed.
fn trials<S: Strategy>(cases: u32, strategy: S, check: impl Fn(&S::Value) -> Check) -> Outcome
where
    S::Value: std::fmt::Debug,
{
    let config = Config {
        cases,
        failure_persistence: None,
        max_shrink_iters: 256,
        ..Config::default()
    };
    let mut runner =
        TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    match runner.run(&strategy, |v| check(&v).map_err(TestCaseError::fail)) {
        Ok(()) => Ok(format!("{cases} trials, 0 failures")),
        Err(TestError::Fail(reason, value)) => Err(format!("failing case {value:?}: {reason}")),
        Err(TestError::Abort(reason)) => Err(format!("aborted: {reason}")),
    }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let reports = gradcheck_all(0, &GradcheckOptions::default()).map_err(fail)?;
    let seconds = start.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let entries: usize = reports.iter().map(|r| r.entries).sum();
    let unresolved: usize = reports.iter().map(|r| r.unresolved).sum();
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.label.as_str())
        .collect();
    let detail = format!(
        "{} terms, {entries} entries ({unresolved} at kinks), max relative error {worst:.2e}, {seconds:.1} s",
        reports.len()
    );
    if failed.is_empty() && worst < 1e-4 && seconds < 60.0 {
        Ok(detail)
    } else {
        Err(format!("{detail}; failing terms {failed:?}"))
    }
}

fn loss_invariants() -> Outcome {
    trials(1000, loss_case(), check_loss_invariants)
}

fn shape_law() -> Outcome {
    trials(200, shape_case(), check_shape_law)
}

fn efdm_exactness() -> Outcome {
    let example = efdm_match(&[3.0, 1.0, 2.0], &[10.0, 20.0, 30.0], 1.0).map_err(fail)?;
    if example != [30.0, 10.0, 20.0] {
        return Err(format!("[3, 1, 2] onto [10, 20, 30] gave {example:?}"));
    }
    trials(1000, efdm_case(), check_efdm)
}

fn auroc_oracle() -> Outcome {
    trials(500, auroc_case(), check_auroc)
}

fn corruption_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut images = 0;
    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let image = Tensor::from_fn(&[3, h, w], |_| rng.random_range(0.0f32..=1.0));
        for kind in CorruptionKind::ALL {
            for spec in [
                CorruptionSpec::at_severity(kind, 0).map_err(fail)?,
                CorruptionSpec::new(kind, kind.neutral()).map_err(fail)?,
            ] {
                let out = corrupt(&image, &spec, rng.random()).map_err(fail)?;
                if out
                    .data()
                    .iter()
                    .zip(image.data())
                    .any(|(a, b)| a.to_bits() != b.to_bits())
                {
                    return Err(format!("{spec:?} changed a {h}x{w} image"));
                }
                images += 1;
            }
        }
    }
    let mut radii: Vec<f64> = (0..=64).map(|i| i as f64 * 0.125).collect();
    radii.extend(CorruptionKind::DefocusBlur.table());
    let mut worst = 0.0f64;
    for r in &radii {
        let sum: f64 = disk_kernel(*r)
            .map_err(fail)?
            .weights
            .iter()
            .map(|&w| w as f64)
            .sum();
        worst = worst.max((sum - 1.0).abs());
    }
    let detail = format!(
        "{images} neutral corruptions bitwise equal, {} disk kernels within {worst:.1e} of 1 (table v{SEVERITY_TABLE_VERSION})",
        radii.len()
    );
    if worst <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Two-category dataset and short schedule shared by the determinism and purity checks.
fn small_run_config(root: &Path) -> std::result::Result<RunConfig, String> {
    let data = root.join("data");
    let spec = SynthSpec {
        categories: vec![Texture::Stripes, Texture::Blobs],
        train: 8,
        test_good: 4,
        test_anomalous: 4,
        aux_per_class: 8,
        image_size: 32,
        ..SynthSpec::default()
    };
    synth_dataset(&data, 5, &spec).map_err(fail)?;
    Ok(RunConfig {
        dataset: data,
        image_size: 32,
        epochs: 2,
        mode: Mode::Fico,
        teacher_training: TeacherConfig {
            max_epochs: 2,
            ..TeacherConfig::default()
        },
        heatmaps: 1,
        ..RunConfig::default()
    })
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn determinism() -> Outcome {
    let root = scratch("determinism");
    let base = small_run_config(&root)?;
    let mut digests = Vec::new();
    for name in ["first", "second"] {
        let cfg = RunConfig {
            out: root.join(name),
            ..base.clone()
        };
        run(&cfg).map_err(fail)?;
        let blob = checkpoint_dir(&cfg.out, "stripes").join(fico::checkpoint::BLOB_FILE);
        digests.push((
            file_digest(&cfg.out.join("results.json")).map_err(fail)?,
            file_digest(&blob).map_err(fail)?,
        ));
    }
    let detail = format!(
        "results.json {} / {}",
        &digests[0].0[..16],
        &digests[1].0[..16]
    );
    if digests[0] == digests[1] {
        Ok(format!("{detail}, checkpoints identical"))
    } else {
        Err(format!(
            "{detail}; checkpoints {} / {}",
            &digests[0].1[..16],
            &digests[1].1[..16]
        ))
    }
}

fn desk_benchmark_direction() -> Outcome {
    let root = scratch("benchmark");
    let report = desk_benchmark(&root, &BenchConfig::default()).map_err(fail)?;
    let s = &report.summary;
    let detail = format!(
        "FICO ID {:.3}; OOD FICO {:.3}, GNL {:.3}, RD {:.3} (RD with matching {:.3}); ablation rows {}, \
         monotone in {}/{} seeds; teacher accuracy {:.3}; {:.0} s",
        s.fico_id,
        s.fico_ood,
        s.gnl_ood,
        s.rd_ood,
        s.rd_matched_ood,
        s.all_ablation_rows,
        s.ablation_monotone_seeds,
        report.seeds.len(),
        report.teacher_accuracy,
        report.seconds
    );
    let pass = s.fico_id_at_least_0_90
        && s.fico_ood_within_0_01_of_gnl
        && s.fico_ood_at_least_rd
        && s.all_ablation_rows
        && report.seconds < 1800.0;
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn inference_purity() -> Outcome {
    let root = scratch("purity");
    let cfg = RunConfig {
        out: root.join("run"),
        ..small_run_config(&root)?
    };
    let (trained, _) = run(&cfg).map_err(fail)?;
    let mut full = Vec::new();
    let mut stripped = Vec::new();
    let mut removed = 0;
    for t in &trained {
        let dst = root.join("stripped").join(&t.category).join("checkpoint");
        copy_without_prefix(&t.checkpoint, &dst, DIIFI_PREFIX).map_err(fail)?;
        let before = CheckpointReader::open(&t.checkpoint).map_err(fail)?;
        let after = CheckpointReader::open(&dst).map_err(fail)?;
        removed += before.names().count() - after.names().count();
        if after.names().any(|n| n.starts_with(DIIFI_PREFIX)) {
            return Err("stripped checkpoint still holds filter weights".into());
        }
        full.push((t.category.clone(), t.checkpoint.clone()));
        stripped.push((t.category.clone(), dst));
    }
    if removed == 0 {
        return Err("trained checkpoints hold no filter weights to remove".into());
    }
    let a = evaluate(&cfg, &full, &root.join("eval_full")).map_err(fail)?;
    let b = evaluate(&cfg, &stripped, &root.join("eval_stripped")).map_err(fail)?;
    let bits = |o: &fico::harness::EvalOutcome| -> Vec<u64> {
        o.scores
            .iter()
            .flat_map(|s| s.samples.iter().map(|x| x.score.to_bits()))
            .collect()
    };
    let diifi_reads = a
        .reads
        .values()
        .chain(b.reads.values())
        .flatten()
        .filter(|n| n.starts_with(DIIFI_PREFIX))
        .count();
    let detail = format!(
        "{} scores compared, {removed} filter tensors removed, {diifi_reads} filter reads",
        bits(&a).len()
    );
    if bits(&a) == bits(&b) && diifi_reads == 0 && a.report == b.report {
        Ok(detail)
    } else {
        Err(detail)
    }
}

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 9] = [
    (1, "gradient fidelity", gradient_fidelity),
    (2, "loss invariants", loss_invariants),
    (3, "filter-chain shape law", shape_law),
    (4, "feature-matching exactness", efdm_exactness),
    (5, "AUROC oracle", auroc_oracle),
    (6, "corruption identities", corruption_identities),
    (7, "determinism", determinism),
    (8, "desk-scale directional result", desk_benchmark_direction),
    (9, "inference purity", inference_purity),
];

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = Vec::new();
    for (n, name, check) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1} s] {detail}"),
            Err(detail) => {
                println!("criterion {n} ({name}): FAIL [{secs:.1} s] {detail}");
                failed.push(n);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
