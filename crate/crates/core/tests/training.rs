//! Training contracts: trajectory length and finiteness, per-mode loss terms and parameters,
//! and the frozen teacher.

use std::path::PathBuf;
use std::sync::OnceLock;

use fico::checkpoint::CheckpointReader;
use fico::harness::{
    build_teacher, init_network, load_train, train, train_category, RunConfig, DIIFI_PREFIX,
    TEACHER_PREFIX,
};
use fico::losses::Mode;
use fico::model::TeacherConfig;
use fico::shift::{synth_dataset, SynthSpec, Texture};

const SIZE: usize = 32;

/// A one-category dataset with a small teacher, built once per test binary.
fn fixture() -> &'static (PathBuf, PathBuf) {
    static FIXTURE: OnceLock<(PathBuf, PathBuf)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("training");
        let _ = std::fs::remove_dir_all(&root);
        let data = root.join("data");
        let spec = SynthSpec {
            categories: vec![Texture::Stripes],
            train: 8,
            test_good: 2,
            test_anomalous: 2,
            aux_per_class: 8,
            image_size: SIZE,
            ..SynthSpec::default()
        };
        synth_dataset(&data, 3, &spec).unwrap();
        let cfg = config(Mode::Fico);
        let teacher = root.join("teacher");
        build_teacher(&data, &teacher, 0, &cfg.arch, &cfg.teacher_training, SIZE).unwrap();
        (data, teacher)
    })
}

fn config(mode: Mode) -> RunConfig {
    RunConfig {
        image_size: SIZE,
        epochs: 1,
        batch_size: 3,
        mode,
        teacher_training: TeacherConfig {
            max_epochs: 2,
            ..TeacherConfig::default()
        },
        ..RunConfig::default()
    }
}

fn images() -> Vec<fico::Tensor<f32>> {
    load_train(&fixture().0, "stripes", SIZE).unwrap()
}

fn teacher() -> CheckpointReader {
    CheckpointReader::open(&fixture().1).unwrap()
}

#[test]
fn one_epoch_records_every_step_with_finite_nonnegative_terms() {
    let cfg = config(Mode::Fico);
    let images = images();
    let (_, _, trajectory, _) = train_category(&cfg, &teacher(), &images).unwrap();
    assert_eq!(trajectory.len(), images.len().div_ceil(cfg.batch_size));
    for (i, step) in trajectory.iter().enumerate() {
        assert_eq!((step.epoch, step.step), (0, i));
        assert!(step.losses.total.is_finite() && step.losses.total >= 0.0);
        for (name, v) in step.losses.components() {
            if let Some(v) = v {
                assert!(v.is_finite() && v >= 0.0, "{name} = {v} at step {i}");
            }
        }
    }
}

#[test]
fn each_mode_records_only_its_terms() {
    let images = images();
    let reader = teacher();
    for mode in Mode::ALL {
        let (_, _, trajectory, _) = train_category(&config(mode), &reader, &images).unwrap();
        for step in &trajectory {
            let b = &step.losses;
            assert_eq!(b.l_rd.is_some(), !mode.uses_disco(), "{mode}");
            assert_eq!(b.l_lowf.is_some(), mode.uses_views(), "{mode}");
            assert_eq!(b.l_abs.is_some(), mode.uses_views(), "{mode}");
            assert_eq!(b.l_co.is_some(), mode.uses_disco(), "{mode}");
            assert_eq!(b.l_fi.is_some(), mode.uses_diifi(), "{mode}");
            assert_eq!(b.l_mse.is_some(), mode.uses_diifi(), "{mode}");
            assert_eq!(b.l_nor.is_some(), mode.uses_nor(), "{mode}");
        }
    }
}

#[test]
fn modes_without_compensation_have_no_compensation_parameters() {
    let reader = teacher();
    for mode in Mode::ALL {
        let (store, _) = init_network(&config(mode), &reader).unwrap();
        let names: Vec<&str> = store.entries().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(
            names.iter().any(|n| n.starts_with("disco.")),
            mode.uses_disco(),
            "{mode}"
        );
        assert_eq!(
            names.iter().any(|n| n.starts_with(DIIFI_PREFIX)),
            mode.uses_diifi(),
            "{mode}"
        );
    }
}

#[test]
fn teacher_weights_do_not_move_during_training() {
    let reader = teacher();
    let (before, _) = init_network(&config(Mode::Fico), &reader).unwrap();
    let cfg = RunConfig {
        epochs: 2,
        ..config(Mode::Fico)
    };
    let (after, _, trajectory, digest) = train_category(&cfg, &reader, &images()).unwrap();
    assert!(trajectory.len() > 1);
    assert_eq!(before.digest(TEACHER_PREFIX), digest);
    assert_eq!(after.digest(TEACHER_PREFIX), digest);
    let trained = after
        .entries()
        .iter()
        .filter(|e| !e.name.starts_with(TEACHER_PREFIX));
    let initial = before
        .entries()
        .iter()
        .filter(|e| !e.name.starts_with(TEACHER_PREFIX));
    assert!(
        trained
            .zip(initial)
            .any(|(a, b)| a.value.data() != b.value.data()),
        "no trainable weight moved"
    );
}

#[test]
fn missing_dataset_is_rejected_before_the_teacher_is_built() {
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("training_missing");
    let cfg = RunConfig {
        dataset: out.join("nowhere"),
        out: out.join("run"),
        categories: vec!["stripes".into()],
        ..config(Mode::Fico)
    };
    let err = train(&cfg).unwrap_err();
    assert!(err.is_validation(), "{err}");
    assert!(!out.join("run").join("teacher").exists());
}
