//! Newline-delimited JSON manifest of edit samples.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::grammar::{InstructionMode, Task};
use super::scorer::QualityScores;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub task: Task,
    pub mode: InstructionMode,
    pub instruction: String,
    /// Image paths, relative to the manifest's directory.
    pub src_path: String,
    pub tgt_path: String,
    pub mask_path: String,
    pub scores: Option<QualityScores>,
    pub accepted: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn push(&mut self, record: ManifestRecord) -> Result<()> {
        if self.records.iter().any(|r| r.id == record.id) {
            return Err(Error::InvalidArgument(format!("duplicate manifest id {}", record.id)));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count_task(&self, task: Task) -> usize {
        self.records.iter().filter(|r| r.task == task).count()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("manifest record serialises"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Manifest::default();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec = serde_json::from_str(line).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", n + 1),
            })?;
            m.push(rec)?;
        }
        Ok(m)
    }

    /// Check ids are unique and every referenced file exists under `root`.
    pub fn validate(&self, root: &Path) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(&r.id) {
                return Err(Error::InvalidArgument(format!("duplicate manifest id {}", r.id)));
            }
            for p in [&r.src_path, &r.tgt_path, &r.mask_path] {
                let full = resolve(root, p);
                if !full.is_file() {
                    return Err(Error::Format {
                        path: full,
                        reason: format!("referenced by {} but missing", r.id),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Join a manifest path onto the manifest's directory.
pub fn resolve(root: &Path, rel: &str) -> PathBuf {
    root.join(rel)
}
