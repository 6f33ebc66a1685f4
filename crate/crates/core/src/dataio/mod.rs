//! Dataset ingestion, preprocessing, class splits, and episode sampling.

pub mod augment;
pub mod cifar;
pub mod episode;
pub mod folder;
pub mod manifest;
pub mod ppm;
pub mod synthetic;

pub use augment::{augment, AugmentPolicy};
pub use cifar::{
    load_cifar100_dir, parse_cifar100_binary, records_to_images, write_cifar100_binary,
    CifarRecord, RECORD_BYTES,
};
pub use episode::{sample_episode, Episode, EpisodeSlot};
pub use manifest::SplitManifest;
pub use synthetic::{make_synthetic_dataset, make_synthetic_dataset_with, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeSet;

/// One image with its class index. Pixels are channel-major `[C,H,W]` in
/// `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor<f32>,
    pub label: usize,
}

impl LabeledImage {
    pub fn new(pixels: Tensor<f32>, label: usize) -> Self {
        debug_assert_eq!(pixels.shape().len(), 3);
        debug_assert!(pixels.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        LabeledImage { pixels, label }
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Disjoint class-id sets for episodic protocols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    pub train_classes: BTreeSet<usize>,
    pub val_classes: BTreeSet<usize>,
    pub test_classes: BTreeSet<usize>,
}

impl ClassSplit {
    /// Partition `0..n_classes` into leading train, middle val, trailing test
    /// blocks.
    pub fn by_counts(n_classes: usize, train: usize, val: usize, test: usize) -> Result<Self> {
        if train + val + test != n_classes {
            return Err(Error::config(format!(
                "split {}+{}+{} does not cover {} classes",
                train, val, test, n_classes
            )));
        }
        Ok(ClassSplit {
            train_classes: (0..train).collect(),
            val_classes: (train..train + val).collect(),
            test_classes: (train + val..n_classes).collect(),
        })
    }

    /// Check pairwise disjointness and, when `n_classes` is given, that the
    /// union covers exactly the dataset's class set.
    pub fn validate(&self, n_classes: Option<usize>) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, set) in [
            ("train", &self.train_classes),
            ("val", &self.val_classes),
            ("test", &self.test_classes),
        ] {
            for &c in set {
                if !seen.insert(c) {
                    return Err(Error::config(format!(
                        "class {} appears in {} and an earlier split",
                        c, name
                    )));
                }
            }
        }
        if let Some(n) = n_classes {
            let expected: BTreeSet<usize> = (0..n).collect();
            if seen != expected {
                return Err(Error::config(format!(
                    "split covers {} classes, dataset has {}",
                    seen.len(),
                    n
                )));
            }
        }
        Ok(())
    }
}

/// Number of distinct labels in a pool.
pub fn class_count(pool: &[LabeledImage]) -> usize {
    pool.iter().map(|img| img.label + 1).max().unwrap_or(0)
}
