//! Split manifests: plain-text lines of `split_name,class_name`.
//!
//! Blank lines and `#` comments are allowed. Split names are `train`,
//! `val`, and `test`.

use crate::error::{Error, Result};
use std::path::Path;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut manifest = SplitManifest::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (split, class) = line.split_once(',').ok_or_else(|| {
                Error::data(format!(
                    "manifest line {}: expected `split_name,class_name`, got {:?}",
                    lineno + 1,
                    raw
                ))
            })?;
            let class = class.trim();
            if class.is_empty() {
                return Err(Error::data(format!(
                    "manifest line {}: empty class name",
                    lineno + 1
                )));
            }
            match split.trim() {
                "train" => manifest.train.push(class.to_string()),
                "val" => manifest.val.push(class.to_string()),
                "test" => manifest.test.push(class.to_string()),
                other => {
                    return Err(Error::data(format!(
                        "manifest line {}: unknown split {:?}",
                        lineno + 1,
                        other
                    )))
                }
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for class in manifest.train.iter().chain(&manifest.val).chain(&manifest.test) {
            if !seen.insert(class.clone()) {
                return Err(Error::data(format!(
                    "class {:?} listed in more than one split",
                    class
                )));
            }
        }
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, classes) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for class in classes {
                out.push_str(name);
                out.push(',');
                out.push_str(class);
                out.push('\n');
            }
        }
        out
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}
