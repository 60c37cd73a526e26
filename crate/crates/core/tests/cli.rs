//! The command-line tool: usage errors, missing inputs and the synth, teacher, train, corrupt
//! and eval pipeline at a tiny scale.

use std::path::Path;
use std::process::{Command, Output};

use fico::harness::RunConfig;
use fico::losses::Mode;
use fico::model::TeacherConfig;

fn fico(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fico"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let o = fico(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_exits_1() {
    let o = fico(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn help_exits_0() {
    assert_eq!(fico(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_with_missing_dataset_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_dataset");
    let o = fico(&[
        "train",
        "--data",
        arg(&missing),
        "--out",
        arg(&dir.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(arg(&missing)), "{}", stderr(&o));
}

#[test]
fn out_of_range_severity_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let p = arg(dir.path());
    let o = fico(&[
        "corrupt",
        "--in",
        p,
        "--out",
        p,
        "--kind",
        "contrast",
        "--severity",
        "6",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (data, shifted, teacher, run) = (
        root.join("data"),
        root.join("shifted"),
        root.join("teacher"),
        root.join("run"),
    );
    let (config, eval) = (root.join("run.json"), root.join("eval"));
    let cfg = RunConfig {
        image_size: 32,
        epochs: 1,
        mode: Mode::Fico,
        categories: vec!["stripes".into()],
        teacher_training: TeacherConfig {
            max_epochs: 1,
            ..TeacherConfig::default()
        },
        heatmaps: 0,
        ..RunConfig::default()
    };
    std::fs::write(&config, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    let steps: [Vec<&str>; 5] = [
        vec![
            "synth",
            "--out",
            arg(&data),
            "--categories",
            "stripes",
            "--train",
            "4",
            "--test-good",
            "2",
            "--test-anomalous",
            "2",
            "--aux-per-class",
            "4",
            "--size",
            "32",
        ],
        vec![
            "teacher",
            "--data",
            arg(&data),
            "--out",
            arg(&teacher),
            "--config",
            arg(&config),
        ],
        vec![
            "train",
            "--config",
            arg(&config),
            "--data",
            arg(&data),
            "--teacher",
            arg(&teacher),
            "--out",
            arg(&run),
        ],
        vec![
            "corrupt",
            "--in",
            arg(&data),
            "--out",
            arg(&shifted),
            "--kind",
            "gaussian_noise",
            "--severity",
            "3",
        ],
        vec![
            "eval",
            "--config",
            arg(&config),
            "--data",
            arg(&shifted),
            "--teacher",
            arg(&teacher),
            "--checkpoints",
            arg(&run),
            "--out",
            arg(&eval),
        ],
    ];
    for step in &steps {
        let o = fico(step);
        assert_eq!(o.status.code(), Some(0), "{step:?}: {}", stderr(&o));
    }
    assert!(run.join("stripes").join("checkpoint").exists());
    let results: serde_json::Value =
        serde_json::from_slice(&std::fs::read(eval.join("results.json")).unwrap()).unwrap();
    assert!(results.is_object());
}
