//! Re-checks every dataset invariant on files already on disk.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use super::{pair_id, DatasetManifest, PreferencePair, MANIFEST_FILE};

#[derive(Debug, Error, PartialEq)]
pub enum ValidationError {
    /// Missing or unreadable input; nothing could be checked.
    #[error("cannot read {path}: {msg}")]
    Input { path: PathBuf, msg: String },
    #[error("{file}:{line}: duplicate pair_id {pair_id}")]
    DuplicatePairId { pair_id: String, file: String, line: usize },
    #[error("{file}:{line}: {msg}")]
    Record { file: String, line: usize, msg: String },
    #[error("manifest: {0}")]
    Manifest(String),
}

impl ValidationError {
    pub fn is_input(&self) -> bool {
        matches!(self, Self::Input { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub levels: Vec<u32>,
    pub counts: BTreeMap<u32, usize>,
    pub total: usize,
    pub equal_split_sizes: bool,
}

fn read(path: &Path) -> Result<String, ValidationError> {
    fs::read_to_string(path).map_err(|e| ValidationError::Input {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn check_record(p: &PreferencePair, level: u32) -> Result<(), String> {
    if p.r != level {
        return Err(format!("record has r={} in the r={level} split", p.r));
    }
    for (name, v) in [
        ("video_id", &p.video_id),
        ("instruction", &p.instruction),
        ("chosen", &p.chosen),
        ("rejected", &p.rejected),
        ("created_by", &p.created_by),
    ] {
        if v.trim().is_empty() {
            return Err(format!("{name} is empty"));
        }
    }
    if p.chosen == p.rejected {
        return Err(format!("pair {} has chosen == rejected", p.pair_id));
    }
    let seed: u64 = p.seed.parse().map_err(|_| format!("seed {:?} is not a u64", p.seed))?;
    let expected = pair_id(&p.video_id, p.kind, p.r, seed);
    if p.pair_id != expected {
        return Err(format!("pair_id {} should be {expected}", p.pair_id));
    }
    Ok(())
}

pub fn validate_dataset(dir: &Path) -> Result<ValidationReport, ValidationError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest =
        serde_json::from_str(&read(&manifest_path)?).map_err(|e| ValidationError::Manifest(e.to_string()))?;
    if manifest.levels.is_empty() {
        return Err(ValidationError::Manifest("no levels".into()));
    }
    if manifest.levels.windows(2).any(|w| w[0] <= w[1]) || manifest.levels.iter().any(|&r| r < 2) {
        return Err(ValidationError::Manifest(format!(
            "levels {:?} must be distinct, >= 2 and in decreasing order",
            manifest.levels
        )));
    }
    if manifest.config_hash.is_empty() {
        return Err(ValidationError::Manifest("missing config_hash".into()));
    }
    let mut seen = HashSet::new();
    let mut counts = BTreeMap::new();
    for &level in &manifest.levels {
        let key = level.to_string();
        let file = manifest
            .files
            .get(&key)
            .ok_or_else(|| ValidationError::Manifest(format!("no file for level {level}")))?;
        let declared = *manifest
            .counts
            .get(&key)
            .ok_or_else(|| ValidationError::Manifest(format!("no count for level {level}")))?;
        let text = read(&dir.join(file))?;
        let mut n = 0;
        let mut prev: Option<(String, String)> = None;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let rec_err = |msg: String| ValidationError::Record {
                file: file.clone(),
                line: line_no,
                msg,
            };
            if line.trim().is_empty() {
                continue;
            }
            let pair: PreferencePair = serde_json::from_str(line).map_err(|e| rec_err(format!("malformed record: {e}")))?;
            check_record(&pair, level).map_err(rec_err)?;
            if !seen.insert(pair.pair_id.clone()) {
                return Err(ValidationError::DuplicatePairId {
                    pair_id: pair.pair_id,
                    file: file.clone(),
                    line: line_no,
                });
            }
            let key = (pair.video_id.clone(), pair.kind.as_str().to_string());
            if let Some(p) = &prev {
                if *p > key {
                    return Err(rec_err(format!("records not sorted by (video_id, kind) at {}", pair.pair_id)));
                }
            }
            prev = Some(key);
            n += 1;
        }
        if n != declared {
            return Err(ValidationError::Manifest(format!(
                "level {level}: manifest declares {declared} records, file has {n}"
            )));
        }
        counts.insert(level, n);
    }
    let total = counts.values().sum();
    let equal = counts.values().collect::<HashSet<_>>().len() <= 1;
    Ok(ValidationReport {
        levels: manifest.levels,
        counts,
        total,
        equal_split_sizes: equal,
    })
}
