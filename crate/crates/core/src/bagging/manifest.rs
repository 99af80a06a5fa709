//! Dataset manifest: which bag files belong to which slide, case and split.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bag::{Bag, BagShape};
use super::bagfile::read_bag;
use crate::error::{bail, Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideEntry {
    pub slide_id: String,
    pub case_id: String,
    pub label: u32,
    #[serde(default)]
    pub split: Split,
    /// Bag files relative to the manifest directory.
    pub bags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub k: usize,
    pub d: usize,
    pub gene_count: usize,
    pub classes: Vec<String>,
    /// JSON list of gene ids, relative to the manifest directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gene_index: Option<String>,
    pub slides: Vec<SlideEntry>,
}

impl DatasetManifest {
    pub fn shape(&self) -> BagShape {
        BagShape {
            k: self.k,
            d: self.d,
            genes: self.gene_count,
            classes: self.classes.len(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_slice(&bytes)?;
        if m.version != MANIFEST_VERSION {
            bail!(Input, "manifest version {} is not supported", m.version);
        }
        m.check()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Structural checks that need no bag files.
    pub fn check(&self) -> Result<()> {
        if self.classes.is_empty() {
            bail!(Input, "manifest lists no classes");
        }
        let mut ids = std::collections::HashSet::new();
        let mut case_split = std::collections::HashMap::new();
        for s in &self.slides {
            if !ids.insert(&s.slide_id) {
                bail!(Input, "slide {} listed twice", s.slide_id);
            }
            if s.label as usize >= self.classes.len() {
                bail!(Input, "slide {} has label {} out of range", s.slide_id, s.label);
            }
            if let Some(prev) = case_split.insert(&s.case_id, s.split) {
                if prev != s.split {
                    bail!(Input, "case {} straddles splits {prev} and {}", s.case_id, s.split);
                }
            }
        }
        Ok(())
    }

    pub fn slides_in(&self, split: Split) -> impl Iterator<Item = &SlideEntry> {
        self.slides.iter().filter(move |s| s.split == split)
    }

    pub fn bag_count(&self) -> usize {
        self.slides.iter().map(|s| s.bags.len()).sum()
    }
}

/// Resolves the directory holding a manifest given either the directory or
/// the manifest file itself.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Reads and validates every bag of the slides in `split`, in manifest order.
pub fn load_split(manifest: &DatasetManifest, root: &Path, split: Split) -> Result<Vec<Bag>> {
    let files: Vec<(&SlideEntry, &String)> = manifest
        .slides_in(split)
        .flat_map(|s| s.bags.iter().map(move |b| (s, b)))
        .collect();
    let shape = manifest.shape();
    files
        .par_iter()
        .map(|(slide, rel)| {
            let bag = read_bag(&root.join(rel))?;
            bag.validate(Some(&shape))?;
            if bag.slide_id != slide.slide_id || bag.label != slide.label {
                bail!(
                    Data,
                    "{rel}: bag says slide {} label {}, manifest says {} label {}",
                    bag.slide_id,
                    bag.label,
                    slide.slide_id,
                    slide.label
                );
            }
            Ok(bag)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> DatasetManifest {
        DatasetManifest {
            version: 1,
            k: 49,
            d: 4,
            gene_count: 0,
            classes: vec!["a".into(), "b".into()],
            gene_index: None,
            slides: vec![
                SlideEntry {
                    slide_id: "s1".into(),
                    case_id: "c1".into(),
                    label: 0,
                    split: Split::Train,
                    bags: vec![],
                },
                SlideEntry {
                    slide_id: "s2".into(),
                    case_id: "c1".into(),
                    label: 1,
                    split: Split::Train,
                    bags: vec![],
                },
            ],
        }
    }

    #[test]
    fn json_roundtrip_and_split_names() {
        let m = manifest();
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains("\"split\":\"train\""));
        let back: DatasetManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn case_may_not_straddle_splits() {
        let mut m = manifest();
        m.check().unwrap();
        m.slides[1].split = Split::Test;
        assert!(m.check().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"{"version":1,"k":49,"d":4,"gene_count":0,"classes":["a"],"slides":[],"extra":1}"#;
        assert!(serde_json::from_str::<DatasetManifest>(text).is_err());
    }
}
