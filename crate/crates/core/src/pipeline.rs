//! Per-video orchestration of selection (ingest, scenes, groups, keyframes)
//! and clean captioning, with the artifacts each stage reads and writes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::captioner::{caption_video, BackendError, CaptionBackend, CaptionError, CaptionedVideo, ClipKeyframes, PromptConfig};
use crate::config::PipelineConfig;
use crate::grouper::{embed_clips, gate_group_count, group_clips, load_embedding_sidecar, make_clips, Clip, ClipEmbedding, ClipGroup, GroupError, GroupGate};
use crate::ingest::{load_manifest, sample_frames, FrameSequence, IngestError, VideoEntry};
use crate::keyframer::{select_keyframes, Keyframe};
use crate::pairset::{FailureRecord, PipelineEvent, Step, StepOutcome};
use crate::segmenter::{detect_boundaries, filter_scenes, import_boundaries, SceneVerdict};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("cannot read {path}: {msg}")]
    Read { path: PathBuf, msg: String },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A video that passed selection, with everything captioning needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedVideo {
    pub entry: VideoEntry,
    pub frame_count: usize,
    pub clips: Vec<Clip>,
    pub groups: Vec<ClipGroup>,
    pub keyframes: Vec<[Keyframe; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Selection {
    pub curated: Vec<CuratedVideo>,
    pub events: Vec<PipelineEvent>,
}

struct Tracker<'a> {
    entry: &'a VideoEntry,
    events: Vec<PipelineEvent>,
}

impl Tracker<'_> {
    fn emit(&mut self, step: Step, outcome: StepOutcome, reason: Option<String>) {
        if let Some(r) = &reason {
            log::info!("{} {:?} {:?}: {}", self.entry.video_id, step, outcome, r);
        }
        self.events.push(PipelineEvent::Video {
            video_id: self.entry.video_id.clone(),
            source: self.entry.bucket(),
            step,
            outcome,
            reason,
        });
    }
}

fn sidecar_embeddings(dir: &Path, video_id: &str, clips: &[Clip]) -> Result<Option<Vec<ClipEmbedding>>, GroupError> {
    let path = dir.join(format!("{video_id}.emb"));
    if !path.exists() {
        return Ok(None);
    }
    let all: BTreeMap<usize, ClipEmbedding> = load_embedding_sidecar(&path)?
        .into_iter()
        .map(|e| (e.clip_id, e))
        .collect();
    clips
        .iter()
        .map(|c| {
            all.get(&c.clip_id).cloned().ok_or_else(|| GroupError::Sidecar {
                path: path.clone(),
                msg: format!("no vector for clip {}", c.clip_id),
            })
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

fn select_one(entry: &VideoEntry, cfg: &PipelineConfig, base: Option<&Path>) -> (Option<CuratedVideo>, Vec<PipelineEvent>) {
    let mut t = Tracker { entry, events: Vec::new() };
    let curated = select_steps(entry, cfg, base, &mut t);
    (curated, t.events)
}

fn select_steps(entry: &VideoEntry, cfg: &PipelineConfig, base: Option<&Path>, t: &mut Tracker) -> Option<CuratedVideo> {
    let [lo, hi] = cfg.ingest.duration_window_s;
    if !cfg.ingest.in_window(entry.duration_s) {
        t.emit(
            Step::Ingest,
            StepOutcome::Rejected,
            Some(format!("duration {} s outside [{lo}, {hi}] s", entry.duration_s)),
        );
        return None;
    }
    let seq = match sample_frames(entry, &cfg.ingest, base) {
        Ok(s) => s,
        Err(e) => {
            t.emit(Step::Ingest, StepOutcome::Failed, Some(e.to_string()));
            return None;
        }
    };
    t.emit(Step::Ingest, StepOutcome::Passed, None);

    let imported = cfg
        .paths
        .boundaries_dir
        .as_ref()
        .map(|d| d.join(format!("{}.txt", entry.video_id)))
        .filter(|p| p.exists());
    let scenes = match imported {
        Some(p) => import_boundaries(&p, &seq),
        None => detect_boundaries(&seq, &cfg.segmenter),
    };
    let scenes = match scenes {
        Ok(s) => s,
        Err(e) => {
            t.emit(Step::Scenes, StepOutcome::Failed, Some(e.to_string()));
            return None;
        }
    };
    let filtered = filter_scenes(&seq, &scenes, &cfg.segmenter);
    match filtered.video_verdict {
        SceneVerdict::Keep => t.emit(Step::Scenes, StepOutcome::Passed, None),
        SceneVerdict::RejectLongScene => {
            t.emit(
                Step::Scenes,
                StepOutcome::Rejected,
                Some(format!("a scene is longer than {} s", cfg.segmenter.max_scene_s)),
            );
            return None;
        }
        SceneVerdict::RejectEmpty => {
            t.emit(Step::Scenes, StepOutcome::Rejected, Some("no scenes left after filtering".into()));
            return None;
        }
    }

    let clips = make_clips(&filtered.kept_scenes);
    let embeddings = match &cfg.grouper.embeddings_dir {
        Some(dir) => sidecar_embeddings(dir, &entry.video_id, &clips).map(|e| e.unwrap_or_else(|| embed_clips(&seq, &clips))),
        None => Ok(embed_clips(&seq, &clips)),
    };
    let groups = match embeddings.and_then(|e| group_clips(&e, &cfg.grouper)) {
        Ok(g) => g,
        Err(e) => {
            t.emit(Step::Groups, StepOutcome::Failed, Some(e.to_string()));
            return None;
        }
    };
    match gate_group_count(&groups, &cfg.grouper) {
        GroupGate::Keep => t.emit(Step::Groups, StepOutcome::Passed, None),
        gate => {
            let why = if gate == GroupGate::RejectSparse { "fewer than" } else { "more than" };
            let bound = if gate == GroupGate::RejectSparse { cfg.grouper.min_groups } else { cfg.grouper.max_groups };
            t.emit(
                Step::Groups,
                StepOutcome::Rejected,
                Some(format!("{} groups, {why} {bound}", groups.len())),
            );
            return None;
        }
    }

    let keyframes: Result<Vec<[Keyframe; 2]>, _> = clips
        .iter()
        .map(|c| select_keyframes(&seq, c, &cfg.keyframer).map(|(a, b)| [a, b]))
        .collect();
    match keyframes {
        Ok(keyframes) => {
            t.emit(Step::Keyframes, StepOutcome::Passed, None);
            Some(CuratedVideo {
                entry: entry.clone(),
                frame_count: seq.frames.len(),
                clips,
                groups,
                keyframes,
            })
        }
        Err(e) => {
            t.emit(Step::Keyframes, StepOutcome::Failed, Some(e.to_string()));
            None
        }
    }
}

/// Runs selection over every manifest entry in parallel; events and curated
/// videos keep manifest order.
pub fn select(cfg: &PipelineConfig) -> Result<Selection, PipelineError> {
    let entries = load_manifest(&cfg.paths.manifest)?;
    let base = cfg.paths.manifest.parent();
    let results: Vec<_> = entries.par_iter().map(|e| select_one(e, cfg, base)).collect();
    let mut out = Selection::default();
    for (curated, events) in results {
        out.events.extend(events);
        out.curated.extend(curated);
    }
    Ok(out)
}

/// Reloads a curated video's frames and pairs them with its keyframe choices.
pub fn keyframe_images(video: &CuratedVideo, cfg: &PipelineConfig) -> Result<(FrameSequence, Vec<ClipKeyframes>), IngestError> {
    let seq = sample_frames(&video.entry, &cfg.ingest, cfg.paths.manifest.parent())?;
    if seq.frames.len() != video.frame_count {
        return Err(IngestError::UnreadableSource {
            path: PathBuf::from(&video.entry.source),
            msg: format!("expected {} frames, found {}", video.frame_count, seq.frames.len()),
        });
    }
    let clips = video
        .clips
        .iter()
        .zip(&video.keyframes)
        .map(|(clip, [a, b])| ClipKeyframes {
            clip: *clip,
            frames: [seq.frames[a.frame_index].clone(), seq.frames[b.frame_index].clone()],
        })
        .collect();
    Ok((seq, clips))
}

fn is_retriable(e: &CaptionError) -> bool {
    matches!(
        e,
        CaptionError::Backend(
            BackendError::Exhausted { .. } | BackendError::Timeout(_) | BackendError::Transport(_) | BackendError::Status { .. }
        )
    )
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CaptionRun {
    pub captioned: Vec<CaptionedVideo>,
    pub failures: Vec<FailureRecord>,
}

/// Clean captions for every curated video. At most `concurrency` videos talk
/// to the backend at once.
pub fn caption_all(
    videos: &[CuratedVideo],
    cfg: &PipelineConfig,
    backend: &dyn CaptionBackend,
    prompts: &PromptConfig,
    concurrency: usize,
) -> CaptionRun {
    let run = || -> Vec<Result<CaptionedVideo, FailureRecord>> {
        videos
            .par_iter()
            .map(|v| {
                let id = &v.entry.video_id;
                let (_, clips) = keyframe_images(v, cfg).map_err(|e| FailureRecord {
                    video_id: id.clone(),
                    error: e.to_string(),
                    retriable: false,
                })?;
                caption_video(id, &clips, backend, prompts).map_err(|e| FailureRecord {
                    video_id: id.clone(),
                    error: e.to_string(),
                    retriable: is_retriable(&e),
                })
            })
            .collect()
    };
    let results = match rayon::ThreadPoolBuilder::new().num_threads(concurrency.max(1)).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    };
    let mut out = CaptionRun::default();
    for r in results {
        match r {
            Ok(c) => out.captioned.push(c),
            Err(f) => {
                log::warn!("captioning {} failed: {}", f.video_id, f.error);
                out.failures.push(f);
            }
        }
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| PipelineError::Write {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let mut text = String::new();
    for it in items {
        text.push_str(&serde_json::to_string(it).expect("records serialise"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| PipelineError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::Read {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Read {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
