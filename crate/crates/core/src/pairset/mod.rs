//! Preference-pair datasets: one line-delimited file per difficulty level,
//! a manifest, the curriculum schedule, funnel statistics and validation.

pub mod funnel;
pub mod schedule;
pub mod validate;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::captioner::{generate_response_pair, CaptionBackend, CaptionError, CaptionedVideo, PairOutcome, PromptConfig};
use crate::perturber::{PerturbationKind, PerturbationSpec};

pub use funnel::{funnel_stats, FunnelError, FunnelReport, FunnelRow, PipelineEvent, Step, StepOutcome};
pub use schedule::{make_schedule, CurriculumStage};
pub use validate::{validate_dataset, ValidationError, ValidationReport};

pub const CREATED_BY: &str = concat!("temple-forge/", env!("CARGO_PKG_VERSION"));
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const SKIPPED_FILE: &str = "skipped.jsonl";

#[derive(Debug, Error)]
pub enum PairsetError {
    #[error("difficulty levels must be non-empty, distinct and >= 2 (got {0:?})")]
    BadLevels(Vec<u32>),
    #[error("no perturbation kinds configured")]
    NoKinds,
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One line of a level file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub pair_id: String,
    pub video_id: String,
    pub instruction: String,
    pub chosen: String,
    pub rejected: String,
    pub kind: PerturbationKind,
    pub r: u32,
    pub seed: String,
    pub created_by: String,
}

pub fn pair_id(video_id: &str, kind: PerturbationKind, r: u32, seed: u64) -> String {
    format!("{video_id}-{kind}-r{r}-{seed}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub levels: Vec<u32>,
    pub files: BTreeMap<String, String>,
    pub counts: BTreeMap<String, usize>,
    pub config_hash: String,
}

pub fn level_file_name(r: u32) -> String {
    format!("pairs_r{r}.jsonl")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub video_id: String,
    pub kind: PerturbationKind,
    pub r: u32,
    pub reason: String,
}

/// A video whose pairs could not be built; safe to retry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub video_id: String,
    pub error: String,
    pub retriable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairBuild {
    /// Levels in descending order.
    pub levels: Vec<u32>,
    pub per_level: BTreeMap<u32, Vec<PreferencePair>>,
    pub skipped: Vec<SkipRecord>,
    pub failures: Vec<FailureRecord>,
}

impl PairBuild {
    pub fn total(&self) -> usize {
        self.per_level.values().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairsetConfig {
    /// Drop a (video, kind) from every level when any level had to skip it,
    /// so all splits stay the same size.
    pub balance_levels: bool,
    /// Stage budget recorded in the curriculum schedule.
    pub steps_per_stage: usize,
}

impl Default for PairsetConfig {
    fn default() -> Self {
        Self {
            balance_levels: true,
            steps_per_stage: 500,
        }
    }
}

/// Levels sorted hardest-last (descending r), after checking they are usable.
pub fn normalize_levels(levels: &[u32]) -> Result<Vec<u32>, PairsetError> {
    let set: BTreeSet<u32> = levels.iter().copied().collect();
    if levels.is_empty() || set.len() != levels.len() || levels.iter().any(|&r| r < 2) {
        return Err(PairsetError::BadLevels(levels.to_vec()));
    }
    Ok(set.into_iter().rev().collect())
}

enum VideoPairs {
    Done(Vec<(u32, PerturbationKind, Result<PreferencePair, SkipRecord>)>),
    Failed(FailureRecord),
}

fn pairs_for_video(
    video: &CaptionedVideo,
    levels: &[u32],
    kinds: &[PerturbationKind],
    backend: &dyn CaptionBackend,
    prompts: &PromptConfig,
    global_seed: u64,
) -> VideoPairs {
    let mut out = Vec::new();
    for &r in levels {
        for &kind in kinds {
            let spec = match PerturbationSpec::derive(global_seed, &video.video_id, kind, r) {
                Ok(s) => s,
                Err(e) => {
                    return VideoPairs::Failed(FailureRecord {
                        video_id: video.video_id.clone(),
                        error: e.to_string(),
                        retriable: false,
                    })
                }
            };
            let item = match generate_response_pair(video, &spec, backend, prompts) {
                Ok(PairOutcome::Pair(p)) => Ok(PreferencePair {
                    pair_id: pair_id(&video.video_id, kind, r, spec.seed),
                    video_id: video.video_id.clone(),
                    instruction: p.instruction,
                    chosen: p.chosen,
                    rejected: p.rejected,
                    kind,
                    r,
                    seed: spec.seed.to_string(),
                    created_by: CREATED_BY.to_string(),
                }),
                Ok(PairOutcome::Skipped { reason }) => Err(SkipRecord {
                    video_id: video.video_id.clone(),
                    kind,
                    r,
                    reason,
                }),
                Err(e) => {
                    let retriable = matches!(e, CaptionError::Backend(_));
                    return VideoPairs::Failed(FailureRecord {
                        video_id: video.video_id.clone(),
                        error: e.to_string(),
                        retriable,
                    });
                }
            };
            out.push((r, kind, item));
        }
    }
    VideoPairs::Done(out)
}

/// Builds one pair per video x level x kind. Videos are processed in
/// parallel; the result is sorted by `(video_id, kind)` within each level.
#[allow(clippy::too_many_arguments)]
pub fn build_pairs(
    videos: &[CaptionedVideo],
    levels: &[u32],
    kinds: &[PerturbationKind],
    backend: &dyn CaptionBackend,
    prompts: &PromptConfig,
    global_seed: u64,
    cfg: &PairsetConfig,
) -> Result<PairBuild, PairsetError> {
    let levels = normalize_levels(levels)?;
    if kinds.is_empty() {
        return Err(PairsetError::NoKinds);
    }
    let mut kinds = kinds.to_vec();
    kinds.sort_by_key(|k| k.as_str());
    kinds.dedup();

    let results: Vec<VideoPairs> = videos
        .par_iter()
        .map(|v| pairs_for_video(v, &levels, &kinds, backend, prompts, global_seed))
        .collect();

    let mut build = PairBuild {
        levels: levels.clone(),
        per_level: levels.iter().map(|&r| (r, Vec::new())).collect(),
        ..PairBuild::default()
    };
    for res in results {
        match res {
            VideoPairs::Failed(f) => {
                log::warn!("video {} failed: {}", f.video_id, f.error);
                build.failures.push(f);
            }
            VideoPairs::Done(items) => {
                let unbalanced: BTreeSet<PerturbationKind> = items
                    .iter()
                    .filter(|(_, _, it)| it.is_err())
                    .map(|(_, k, _)| *k)
                    .collect();
                for (r, kind, item) in items {
                    match item {
                        Err(skip) => {
                            log::info!("skipped: {}", skip.reason);
                            build.skipped.push(skip);
                        }
                        Ok(pair) if cfg.balance_levels && unbalanced.contains(&kind) => {
                            build.skipped.push(SkipRecord {
                                video_id: pair.video_id,
                                kind,
                                r,
                                reason: "dropped to keep level sizes equal".into(),
                            });
                        }
                        Ok(pair) => build.per_level.get_mut(&r).expect("level present").push(pair),
                    }
                }
            }
        }
    }
    for pairs in build.per_level.values_mut() {
        pairs.sort_by(|a, b| (&a.video_id, a.kind.as_str()).cmp(&(&b.video_id, b.kind.as_str())));
    }
    Ok(build)
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PairsetError> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it).expect("records serialise");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|source| PairsetError::Write {
        path: path.to_path_buf(),
        source,
    })?;
    f.write_all(&buf).map_err(|source| PairsetError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes level files, the manifest and the skip/failure logs into `dir`.
pub fn write_dataset(dir: &Path, build: &PairBuild, config_hash: &str) -> Result<DatasetManifest, PairsetError> {
    fs::create_dir_all(dir).map_err(|source| PairsetError::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut manifest = DatasetManifest {
        levels: build.levels.clone(),
        files: BTreeMap::new(),
        counts: BTreeMap::new(),
        config_hash: config_hash.to_string(),
    };
    for &r in &build.levels {
        let pairs = &build.per_level[&r];
        let name = level_file_name(r);
        write_lines(&dir.join(&name), pairs)?;
        manifest.files.insert(r.to_string(), name);
        manifest.counts.insert(r.to_string(), pairs.len());
    }
    write_lines(&dir.join(SKIPPED_FILE), &build.skipped)?;
    write_lines(&dir.join(FAILURES_FILE), &build.failures)?;
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    text.push('\n');
    fs::write(&path, text).map_err(|source| PairsetError::Write { path, source })?;
    Ok(manifest)
}
