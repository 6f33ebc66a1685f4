//! Directory-of-class-folders loader.
//!
//! `root/<class_name>/*.ppm`, with a split manifest assigning class names
//! to train/val/test. Images must share one resolution; resizing other
//! sources is out of scope for this loader.

use super::manifest::SplitManifest;
use super::{ClassSplit, LabeledImage};
use crate::error::{Error, Result};
use std::collections::BTreeSet;
use std::path::Path;

pub struct FolderDataset {
    pub images: Vec<LabeledImage>,
    /// Class names indexed by label id.
    pub class_names: Vec<String>,
    pub split: ClassSplit,
}

pub fn load_folder_dataset(root: &Path, manifest: &SplitManifest) -> Result<FolderDataset> {
    let mut class_names: Vec<String> = manifest
        .train
        .iter()
        .chain(&manifest.val)
        .chain(&manifest.test)
        .cloned()
        .collect();
    class_names.sort();

    let name_to_id = |name: &str| -> usize {
        class_names.binary_search_by(|c| c.as_str().cmp(name)).expect("manifest class")
    };
    let to_set = |names: &[String]| -> BTreeSet<usize> {
        names.iter().map(|n| name_to_id(n)).collect()
    };
    let split = ClassSplit {
        train_classes: to_set(&manifest.train),
        val_classes: to_set(&manifest.val),
        test_classes: to_set(&manifest.test),
    };
    split.validate(Some(class_names.len()))?;

    let mut images = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (label, name) in class_names.iter().enumerate() {
        let dir = root.join(name);
        if !dir.is_dir() {
            return Err(Error::data(format!(
                "class folder {:?} listed in the manifest does not exist",
                dir
            )));
        }
        let mut files: Vec<_> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "ppm"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::data(format!("class folder {:?} holds no .ppm images", dir)));
        }
        for path in files {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let pixels = super::ppm::parse_ppm(&bytes).map_err(|e| match e {
                Error::MalformedFile { reason, .. } => Error::MalformedFile {
                    path: path.clone(),
                    reason,
                },
                other => other,
            })?;
            let hw = (pixels.shape()[1], pixels.shape()[2]);
            match dims {
                None => dims = Some(hw),
                Some(expected) if expected != hw => {
                    return Err(Error::data(format!(
                        "image {:?} is {}x{}, dataset is {}x{}",
                        path, hw.0, hw.1, expected.0, expected.1
                    )))
                }
                _ => {}
            }
            images.push(LabeledImage::new(pixels, label));
        }
    }
    Ok(FolderDataset {
        images,
        class_names,
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::super::ppm::write_ppm;
    use super::*;
    use crate::tensor::Tensor;

    fn write_class(dir: &Path, name: &str, count: usize, side: usize) {
        let class_dir = dir.join(name);
        std::fs::create_dir_all(&class_dir).unwrap();
        for i in 0..count {
            let data: Vec<f32> = (0..3 * side * side)
                .map(|j| ((i * 31 + j) % 240) as f32 / 255.0)
                .collect();
            let img = Tensor::from_vec(&[3, side, side], data);
            std::fs::write(class_dir.join(format!("{i:03}.ppm")), write_ppm(&img)).unwrap();
        }
    }

    #[test]
    fn loads_classes_and_split() {
        let dir = tempfile::tempdir().unwrap();
        write_class(dir.path(), "ant", 2, 8);
        write_class(dir.path(), "bee", 3, 8);
        write_class(dir.path(), "cat", 1, 8);
        let manifest = SplitManifest::parse("train,ant\nval,bee\ntest,cat\n").unwrap();
        let ds = load_folder_dataset(dir.path(), &manifest).unwrap();
        assert_eq!(ds.images.len(), 6);
        assert_eq!(ds.class_names, vec!["ant", "bee", "cat"]);
        assert_eq!(ds.split.train_classes.len(), 1);
        let ant_id = 0;
        assert_eq!(ds.images.iter().filter(|i| i.label == ant_id).count(), 2);
    }

    #[test]
    fn missing_folder_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_class(dir.path(), "ant", 2, 8);
        let manifest = SplitManifest::parse("train,ant\ntest,ghost\n").unwrap();
        assert!(load_folder_dataset(dir.path(), &manifest).is_err());
    }

    #[test]
    fn mixed_resolutions_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_class(dir.path(), "ant", 1, 8);
        write_class(dir.path(), "bee", 1, 16);
        let manifest = SplitManifest::parse("train,ant\ntest,bee\n").unwrap();
        assert!(load_folder_dataset(dir.path(), &manifest).is_err());
    }
}
