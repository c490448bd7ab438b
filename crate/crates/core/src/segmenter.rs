//! Scene boundary detection and the scene-level selection filters.
//!
//! The built-in detector thresholds the mean absolute RGB difference between
//! adjacent frames. Boundaries computed by an external shot detector can be
//! imported instead with [`import_boundaries`].
//!
//! Scene timing uses half-open spans: a scene covering frames `a..=b` spans
//! `[a / fps, (b + 1) / fps)`, so its duration is `frame_count / fps`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Frame, FrameSequence};

#[derive(Debug, Error, PartialEq)]
pub enum SegmentError {
    #[error("frame sequence is empty")]
    EmptySequence,
    #[error("cannot read boundary file {path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("boundary file line {line}: expected `start_frame,end_frame`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("scene {second} (frames {second_start}..={second_end}) overlaps scene {first} (ends at {first_end})")]
    Overlap {
        first: usize,
        first_end: usize,
        second: usize,
        second_start: usize,
        second_end: usize,
    },
    #[error("scene {scene} spans frames {start}..={end} but the video has {frames} frames")]
    OutOfRange {
        scene: usize,
        start: usize,
        end: usize,
        frames: usize,
    },
    #[error("invalid segmenter config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBoundary {
    pub scene_id: usize,
    pub start_frame: usize,
    pub end_frame: usize,
    pub start_s: f64,
    pub end_s: f64,
}

impl SceneBoundary {
    pub fn new(scene_id: usize, start_frame: usize, end_frame: usize, fps: f64) -> Self {
        debug_assert!(start_frame <= end_frame);
        Self {
            scene_id,
            start_frame,
            end_frame,
            start_s: start_frame as f64 / fps,
            end_s: (end_frame + 1) as f64 / fps,
        }
    }

    pub fn frame_count(&self) -> usize {
        self.end_frame - self.start_frame + 1
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub min_monochrome_s: f64,
    pub max_scene_s: f64,
    pub cut_threshold: f64,
    pub monochrome_stddev_eps: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            min_monochrome_s: 0.2,
            max_scene_s: 16.0,
            cut_threshold: 0.30,
            monochrome_stddev_eps: 4.0,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<(), SegmentError> {
        let all = [
            ("min_monochrome_s", self.min_monochrome_s),
            ("max_scene_s", self.max_scene_s),
            ("cut_threshold", self.cut_threshold),
            ("monochrome_stddev_eps", self.monochrome_stddev_eps),
        ];
        for (name, v) in all {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SegmentError::Config(format!("{name} must be > 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneVerdict {
    Keep,
    RejectLongScene,
    RejectEmpty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFilterOutcome {
    pub kept_scenes: Vec<SceneBoundary>,
    pub dropped_monochrome: usize,
    pub video_verdict: SceneVerdict,
}

/// Mean absolute per-byte difference of two frames, scaled to `[0, 1]`.
/// Frames of different sizes count as a hard cut.
pub fn frame_difference(a: &Frame, b: &Frame) -> f64 {
    if (a.width, a.height) != (b.width, b.height) {
        return 1.0;
    }
    let sum: u64 = a.data.iter().zip(&b.data).map(|(&x, &y)| u64::from(x.abs_diff(y))).sum();
    sum as f64 / (a.data.len() as f64 * 255.0)
}

pub fn detect_boundaries(seq: &FrameSequence, cfg: &SegmenterConfig) -> Result<Vec<SceneBoundary>, SegmentError> {
    if seq.is_empty() {
        return Err(SegmentError::EmptySequence);
    }
    let mut scenes = Vec::new();
    let mut start = 0;
    for i in 1..seq.len() {
        if frame_difference(&seq.frames[i - 1], &seq.frames[i]) >= cfg.cut_threshold {
            scenes.push(SceneBoundary::new(scenes.len(), start, i - 1, seq.sample_fps));
            start = i;
        }
    }
    scenes.push(SceneBoundary::new(scenes.len(), start, seq.len() - 1, seq.sample_fps));
    Ok(scenes)
}

/// Parses `start_frame,end_frame` lines (inclusive indices) and validates
/// them against `seq`.
pub fn parse_boundaries(text: &str, seq: &FrameSequence) -> Result<Vec<SceneBoundary>, SegmentError> {
    let mut scenes: Vec<SceneBoundary> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let malformed = || SegmentError::Malformed {
            line: i + 1,
            text: raw.to_string(),
        };
        let (a, b) = line.split_once(',').ok_or_else(malformed)?;
        let start: usize = a.trim().parse().map_err(|_| malformed())?;
        let end: usize = b.trim().parse().map_err(|_| malformed())?;
        if start > end {
            return Err(malformed());
        }
        let idx = scenes.len();
        if end >= seq.len() {
            return Err(SegmentError::OutOfRange {
                scene: idx,
                start,
                end,
                frames: seq.len(),
            });
        }
        if let Some(prev) = scenes.last() {
            if start <= prev.end_frame {
                return Err(SegmentError::Overlap {
                    first: idx - 1,
                    first_end: prev.end_frame,
                    second: idx,
                    second_start: start,
                    second_end: end,
                });
            }
        }
        scenes.push(SceneBoundary::new(idx, start, end, seq.sample_fps));
    }
    Ok(scenes)
}

pub fn import_boundaries(path: &Path, seq: &FrameSequence) -> Result<Vec<SceneBoundary>, SegmentError> {
    let text = fs::read_to_string(path).map_err(|e| SegmentError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    parse_boundaries(&text, seq)
}

/// Population standard deviation of each RGB channel.
pub fn channel_stddev(frame: &Frame) -> [f64; 3] {
    let n = frame.pixel_count() as f64;
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    for px in frame.data.chunks_exact(3) {
        for c in 0..3 {
            let v = f64::from(px[c]);
            sum[c] += v;
            sq[c] += v * v;
        }
    }
    let mut out = [0f64; 3];
    for c in 0..3 {
        let mean = sum[c] / n;
        out[c] = (sq[c] / n - mean * mean).max(0.0).sqrt();
    }
    out
}

pub fn is_monochrome(seq: &FrameSequence, scene: &SceneBoundary, cfg: &SegmenterConfig) -> bool {
    seq.frames[scene.start_frame..=scene.end_frame]
        .iter()
        .all(|f| channel_stddev(f).iter().all(|&s| s <= cfg.monochrome_stddev_eps))
}

pub fn filter_scenes(seq: &FrameSequence, scenes: &[SceneBoundary], cfg: &SegmenterConfig) -> SceneFilterOutcome {
    let long = scenes.iter().any(|s| s.duration_s() > cfg.max_scene_s);
    let mut kept = Vec::with_capacity(scenes.len());
    let mut dropped = 0;
    for s in scenes {
        if s.duration_s() < cfg.min_monochrome_s && is_monochrome(seq, s, cfg) {
            dropped += 1;
        } else {
            kept.push(*s);
        }
    }
    let verdict = if long {
        SceneVerdict::RejectLongScene
    } else if kept.is_empty() {
        SceneVerdict::RejectEmpty
    } else {
        SceneVerdict::Keep
    };
    SceneFilterOutcome {
        kept_scenes: kept,
        dropped_monochrome: dropped,
        video_verdict: verdict,
    }
}
