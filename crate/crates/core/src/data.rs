//! Dataset manifest: a JSON list of cases with per-split roles.
//!
//! Paths inside the manifest are relative to the manifest file's
//! directory so a dataset directory can be moved wholesale.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPLIT_LABELED: &str = "labeled";
pub const SPLIT_UNLABELED: &str = "unlabeled";
pub const SPLIT_VAL: &str = "val";
pub const SPLIT_TEST: &str = "test";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CaseEntry {
    pub id: String,
    pub image_path: String,
    pub label_path: Option<String>,
    pub split: String,
}

/// Manifest plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub cases: Vec<CaseEntry>,
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(cases: Vec<CaseEntry>, root: PathBuf) -> Self {
        Manifest { cases, root }
    }

    /// Serializes as a bare JSON array of case entries.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(&self.cases)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)
            .map_err(|e| Error::Format(format!("cannot read manifest {}: {e}", path.display())))?;
        let cases: Vec<CaseEntry> = serde_json::from_str(&raw)
            .map_err(|e| Error::Format(format!("bad manifest {}: {e}", path.display())))?;
        let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Ok(Manifest { cases, root })
    }

    pub fn split(&self, split: &str) -> Vec<&CaseEntry> {
        self.cases.iter().filter(|c| c.split == split).collect()
    }

    pub fn image_path(&self, case: &CaseEntry) -> PathBuf {
        self.root.join(&case.image_path)
    }

    pub fn label_path(&self, case: &CaseEntry) -> Option<PathBuf> {
        case.label_path.as_ref().map(|p| self.root.join(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_split_filter() {
        let dir = tempfile::tempdir().unwrap();
        let cases = vec![
            CaseEntry {
                id: "a".into(),
                image_path: "images/a.vol".into(),
                label_path: Some("labels/a.vol".into()),
                split: SPLIT_LABELED.into(),
            },
            CaseEntry {
                id: "b".into(),
                image_path: "images/b.vol".into(),
                label_path: None,
                split: SPLIT_UNLABELED.into(),
            },
        ];
        let m = Manifest::new(cases.clone(), dir.path().to_path_buf());
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back.cases, cases);
        assert_eq!(back.split(SPLIT_LABELED).len(), 1);
        assert_eq!(back.split(SPLIT_UNLABELED)[0].id, "b");
        assert_eq!(back.image_path(back.split(SPLIT_UNLABELED)[0]), dir.path().join("images/b.vol"));
        // Top level must be a bare array.
        let raw = std::fs::read_to_string(&path).unwrap();
        assert!(raw.trim_start().starts_with('['));
    }

    #[test]
    fn unlabeled_serializes_null_label() {
        let c = CaseEntry {
            id: "u".into(),
            image_path: "i.vol".into(),
            label_path: None,
            split: SPLIT_UNLABELED.into(),
        };
        let js = serde_json::to_value(&c).unwrap();
        assert_eq!(js["label_path"], serde_json::Value::Null);
    }
}
