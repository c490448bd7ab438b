//! Curriculum schedule: one training stage per difficulty level, easiest
//! (largest r) first.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{level_file_name, normalize_levels, PairsetError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumStage {
    pub stage_index: usize,
    pub r: u32,
    pub dataset_path: PathBuf,
    pub steps: usize,
}

pub fn make_schedule(levels: &[u32], dataset_dir: &Path, steps_per_stage: usize) -> Result<Vec<CurriculumStage>, PairsetError> {
    Ok(normalize_levels(levels)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| CurriculumStage {
            stage_index: i,
            r,
            dataset_path: dataset_dir.join(level_file_name(r)),
            steps: steps_per_stage,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_levels_run_easiest_first() {
        let s = make_schedule(&[16, 8, 4, 2], Path::new("d"), 10).unwrap();
        assert_eq!(s.iter().map(|s| s.r).collect::<Vec<_>>(), [16, 8, 4, 2]);
        assert_eq!(s[3].stage_index, 3);
        assert_eq!(s[0].dataset_path, Path::new("d/pairs_r16.jsonl"));
    }

    #[test]
    fn single_and_unordered_levels() {
        assert_eq!(make_schedule(&[4], Path::new("d"), 1).unwrap().len(), 1);
        let s = make_schedule(&[2, 16], Path::new("d"), 1).unwrap();
        assert_eq!(s.iter().map(|s| s.r).collect::<Vec<_>>(), [16, 2]);
    }

    #[test]
    fn duplicate_levels_rejected() {
        assert!(matches!(make_schedule(&[8, 8], Path::new("d"), 1), Err(PairsetError::BadLevels(_))));
    }
}
