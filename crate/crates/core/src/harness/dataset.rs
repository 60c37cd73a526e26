//! Loading datasets laid out as `<root>/<category>/{train/good, test/<defect>}`.

use std::path::Path;

use crate::error::{FicoError, Result};
use crate::io::{list_dirs, list_png, read_rgb_sized};
use crate::model::AuxSample;
use crate::shift::synth::AUX_DIR;
use crate::tensor::Tensor;

pub const GOOD: &str = "good";

/// One test image. Label `0` is normal (`good`), `1` anomalous (any other directory).
#[derive(Clone, Debug)]
pub struct TestImage {
    /// `<defect>/<file stem>`.
    pub id: String,
    pub defect: String,
    pub label: u8,
    pub image: Tensor<f32>,
}

/// Categories are the sub-directories of `root` that contain a `train` directory.
pub fn discover_categories(root: &Path) -> Result<Vec<String>> {
    let cats: Vec<String> = list_dirs(root)?
        .into_iter()
        .filter(|c| root.join(c).join("train").is_dir())
        .collect();
    if cats.is_empty() {
        return Err(FicoError::Dataset(format!(
            "no categories under {}",
            root.display()
        )));
    }
    Ok(cats)
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(FicoError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ))
    }
}

/// Normal training images of a category. Anything in `train/` other than `good/` is rejected,
/// since the training split must hold only normal samples.
pub fn load_train(root: &Path, category: &str, size: usize) -> Result<Vec<Tensor<f32>>> {
    let dir = root.join(category).join("train");
    require_dir(&dir)?;
    for entry in std::fs::read_dir(&dir).map_err(|e| FicoError::io(&dir, e))? {
        let entry = entry.map_err(|e| FicoError::io(&dir, e))?;
        if entry.file_name() != GOOD {
            return Err(FicoError::Dataset(format!(
                "training split may only contain `{GOOD}`, found {}",
                entry.path().display()
            )));
        }
    }
    let files = list_png(&dir.join(GOOD))?;
    if files.is_empty() {
        return Err(FicoError::Dataset(format!(
            "no training images in {}",
            dir.join(GOOD).display()
        )));
    }
    files
        .iter()
        .map(|p| read_rgb_sized(p, Some(size)))
        .collect()
}

/// Every test image of a category, defect directories in sorted order.
pub fn load_test(root: &Path, category: &str, size: usize) -> Result<Vec<TestImage>> {
    let dir = root.join(category).join("test");
    require_dir(&dir)?;
    let mut out = Vec::new();
    for defect in list_dirs(&dir)? {
        let label = u8::from(defect != GOOD);
        for p in list_png(&dir.join(&defect))? {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            out.push(TestImage {
                id: format!("{defect}/{stem}"),
                defect: defect.clone(),
                label,
                image: read_rgb_sized(&p, Some(size))?,
            });
        }
    }
    if out.is_empty() {
        return Err(FicoError::Dataset(format!(
            "no test images in {}",
            dir.display()
        )));
    }
    Ok(out)
}

/// The auxiliary classification set `<root>/aux/<class>/*.png`, classes in sorted order.
pub fn load_aux(root: &Path, size: usize) -> Result<(Vec<String>, Vec<AuxSample>)> {
    let dir = root.join(AUX_DIR);
    require_dir(&dir)?;
    let classes = list_dirs(&dir)?;
    let mut samples = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        for p in list_png(&dir.join(class))? {
            samples.push(AuxSample {
                image: read_rgb_sized(&p, Some(size))?,
                label,
            });
        }
    }
    if classes.len() < 2 || samples.is_empty() {
        return Err(FicoError::Dataset(format!(
            "auxiliary set under {} needs two or more classes",
            dir.display()
        )));
    }
    Ok((classes, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shift::{synth_dataset, SynthSpec, Texture};

    fn data(dir: &Path) -> std::path::PathBuf {
        let root = dir.join("d");
        let spec = SynthSpec {
            categories: vec![Texture::Stripes],
            train: 3,
            test_good: 2,
            test_anomalous: 3,
            aux_per_class: 1,
            image_size: 32,
            ..Default::default()
        };
        synth_dataset(&root, 1, &spec).unwrap();
        root
    }

    #[test]
    fn loads_splits_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let root = data(dir.path());
        assert_eq!(discover_categories(&root).unwrap(), vec!["stripes"]);
        assert_eq!(load_train(&root, "stripes", 32).unwrap().len(), 3);
        let test = load_test(&root, "stripes", 32).unwrap();
        assert_eq!(test.iter().filter(|t| t.label == 0).count(), 2);
        assert_eq!(test.iter().filter(|t| t.label == 1).count(), 3);
        assert!(test.iter().all(|t| (t.label == 0) == (t.defect == GOOD)));
        let (classes, aux) = load_aux(&root, 32).unwrap();
        assert_eq!(classes.len(), 4);
        assert_eq!(aux.len(), 4);
        assert_eq!(
            load_train(&root, "stripes", 16).unwrap()[0].shape(),
            &[3, 16, 16]
        );
    }

    #[test]
    fn anomalous_training_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let root = data(dir.path());
        std::fs::create_dir_all(root.join("stripes/train/scratch")).unwrap();
        assert!(matches!(
            load_train(&root, "stripes", 32),
            Err(FicoError::Dataset(_))
        ));
    }

    #[test]
    fn missing_dataset_names_the_path() {
        let err = load_train(Path::new("/nonexistent/data"), "cat", 32).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("/nonexistent/data/cat/train"));
    }
}
