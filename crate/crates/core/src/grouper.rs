//! Similarity grouping of clips by middle-frame embeddings, and the
//! distinct-group gate.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Frame, FrameSequence};
use crate::segmenter::SceneBoundary;

/// Slack on the `cosine >= tau` comparison so that `tau = 1` still joins
/// exact duplicates despite rounding in the re-normalised centroid.
pub const COSINE_TOLERANCE: f64 = 1e-12;

/// Dimension of the built-in colour-histogram embedding (3 channels x 64 bins).
pub const HISTOGRAM_DIM: usize = 192;

#[derive(Debug, Error, PartialEq)]
pub enum GroupError {
    #[error("vector dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("no embeddings to group")]
    Empty,
    #[error("embeddings must be sorted by clip_id (found {found} after {prev})")]
    Unsorted { prev: usize, found: usize },
    #[error("embedding sidecar {path}: {msg}")]
    Sidecar { path: PathBuf, msg: String },
    #[error("invalid grouper config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub clip_id: usize,
    pub scene: SceneBoundary,
    pub middle_frame: usize,
}

/// One clip per scene, numbered in temporal order.
pub fn make_clips(scenes: &[SceneBoundary]) -> Vec<Clip> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| Clip {
            clip_id: i,
            scene: *s,
            middle_frame: middle_frame(s),
        })
        .collect()
}

pub fn middle_frame(scene: &SceneBoundary) -> usize {
    (scene.start_frame + scene.end_frame) / 2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEmbedding {
    pub clip_id: usize,
    pub vector: Vec<f64>,
}

impl ClipEmbedding {
    /// Wraps a raw vector, normalising it to unit length.
    pub fn new(clip_id: usize, raw: Vec<f64>) -> Result<Self, GroupError> {
        Ok(Self {
            clip_id,
            vector: normalize(&raw).ok_or(GroupError::ZeroVector)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipGroup {
    pub group_id: usize,
    pub member_clip_ids: Vec<usize>,
    pub centroid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrouperConfig {
    pub tau: f64,
    pub min_groups: usize,
    pub max_groups: usize,
    /// Embedding sidecar files, looked up as `<dir>/<video_id>.emb`. When
    /// unset or missing for a video, the colour histogram is used.
    pub embeddings_dir: Option<PathBuf>,
}

impl Default for GrouperConfig {
    fn default() -> Self {
        Self {
            tau: 0.85,
            min_groups: 4,
            max_groups: 32,
            embeddings_dir: None,
        }
    }
}

impl GrouperConfig {
    pub fn validate(&self) -> Result<(), GroupError> {
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(GroupError::Config("tau must lie in [-1, 1]".into()));
        }
        if self.min_groups < 1 || self.min_groups > self.max_groups {
            return Err(GroupError::Config("need 1 <= min_groups <= max_groups".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupGate {
    Keep,
    RejectSparse,
    RejectComplex,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, GroupError> {
    if a.len() != b.len() {
        return Err(GroupError::DimensionMismatch(a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(GroupError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Greedy grouping in clip order: each clip joins the earliest group whose
/// centroid is within `tau`, otherwise it founds a new group. A group's
/// centroid is the normalised sum of its members and is refreshed on every join.
pub fn group_clips(embeddings: &[ClipEmbedding], cfg: &GrouperConfig) -> Result<Vec<ClipGroup>, GroupError> {
    let first = embeddings.first().ok_or(GroupError::Empty)?;
    let dim = first.vector.len();
    for w in embeddings.windows(2) {
        if w[1].clip_id <= w[0].clip_id {
            return Err(GroupError::Unsorted {
                prev: w[0].clip_id,
                found: w[1].clip_id,
            });
        }
    }

    struct Acc {
        members: Vec<usize>,
        sum: Vec<f64>,
        centroid: Vec<f64>,
    }
    let mut groups: Vec<Acc> = Vec::new();
    for e in embeddings {
        if e.vector.len() != dim {
            return Err(GroupError::DimensionMismatch(dim, e.vector.len()));
        }
        // A zero centroid (members cancelled out) has similarity 0 with anything.
        let target = groups.iter().position(|g| {
            let sim = if norm(&g.centroid) == 0.0 {
                0.0
            } else {
                cosine(&g.centroid, &e.vector).unwrap_or(0.0)
            };
            sim >= cfg.tau - COSINE_TOLERANCE
        });
        match target {
            Some(i) => {
                let g = &mut groups[i];
                g.members.push(e.clip_id);
                g.sum.iter_mut().zip(&e.vector).for_each(|(s, x)| *s += x);
                g.centroid = normalize(&g.sum).unwrap_or_else(|| vec![0.0; dim]);
            }
            None => groups.push(Acc {
                members: vec![e.clip_id],
                sum: e.vector.clone(),
                centroid: normalize(&e.vector).ok_or(GroupError::ZeroVector)?,
            }),
        }
    }
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(i, g)| ClipGroup {
            group_id: i,
            member_clip_ids: g.members,
            centroid: g.centroid,
        })
        .collect())
}

pub fn gate_group_count(groups: &[ClipGroup], cfg: &GrouperConfig) -> GroupGate {
    match groups.len() {
        n if n < cfg.min_groups => GroupGate::RejectSparse,
        n if n > cfg.max_groups => GroupGate::RejectComplex,
        _ => GroupGate::Keep,
    }
}

/// Per-channel 64-bin colour histogram, L2-normalised.
pub fn histogram_embedding(frame: &Frame) -> Vec<f64> {
    let mut h = vec![0f64; HISTOGRAM_DIM];
    for px in frame.data.chunks_exact(3) {
        for (c, &v) in px.iter().enumerate() {
            h[c * 64 + usize::from(v >> 2)] += 1.0;
        }
    }
    normalize(&h).expect("a frame has at least one pixel")
}

/// Histogram embeddings of each clip's middle frame.
pub fn embed_clips(seq: &FrameSequence, clips: &[Clip]) -> Vec<ClipEmbedding> {
    clips
        .iter()
        .map(|c| ClipEmbedding {
            clip_id: c.clip_id,
            vector: histogram_embedding(&seq.frames[c.middle_frame]),
        })
        .collect()
}

/// Parses a sidecar: a `dim=<n>` header, then `clip_id: f,f,...` lines.
pub fn parse_embedding_sidecar(text: &str, path: &Path) -> Result<Vec<ClipEmbedding>, GroupError> {
    let err = |msg: String| GroupError::Sidecar {
        path: path.to_path_buf(),
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| err("missing dim= header".into()))?;
    let dim: usize = header
        .trim()
        .strip_prefix("dim=")
        .and_then(|d| d.trim().parse().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| err(format!("bad header {header:?}")))?;
    let mut out: Vec<ClipEmbedding> = Vec::new();
    for (i, line) in lines {
        let (id, values) = line
            .split_once(':')
            .ok_or_else(|| err(format!("line {}: missing ':'", i + 1)))?;
        let clip_id: usize = id.trim().parse().map_err(|_| err(format!("line {}: bad clip id", i + 1)))?;
        let vector = values
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| err(format!("line {}: {e}", i + 1)))?;
        if vector.len() != dim {
            return Err(err(format!("line {}: expected {dim} values, got {}", i + 1, vector.len())));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(err(format!("line {}: non-finite value", i + 1)));
        }
        let emb = ClipEmbedding::new(clip_id, vector).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
        out.push(emb);
    }
    out.sort_by_key(|e| e.clip_id);
    Ok(out)
}

pub fn load_embedding_sidecar(path: &Path) -> Result<Vec<ClipEmbedding>, GroupError> {
    let text = fs::read_to_string(path).map_err(|e| GroupError::Sidecar {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    parse_embedding_sidecar(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn emb(id: usize, v: &[f64]) -> ClipEmbedding {
        ClipEmbedding::new(id, v.to_vec()).unwrap()
    }

    fn scene(a: usize, b: usize) -> SceneBoundary {
        SceneBoundary::new(0, a, b, 2.0)
    }

    #[test]
    fn middle_frames() {
        assert_eq!(middle_frame(&scene(0, 4)), 2);
        assert_eq!(middle_frame(&scene(0, 5)), 2);
        assert_eq!(middle_frame(&scene(7, 7)), 7);
    }

    #[test]
    fn cosine_cases() {
        let v = [0.3, -1.2, 2.0];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert_eq!(cosine(&[1.0], &[1.0, 0.0]), Err(GroupError::DimensionMismatch(1, 2)));
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(GroupError::ZeroVector));
    }

    #[test]
    fn identical_vectors_form_one_group() {
        let e: Vec<_> = (0..6).map(|i| emb(i, &[1.0, 2.0, 3.0])).collect();
        let g = group_clips(&e, &GrouperConfig::default()).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].member_clip_ids, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn orthogonal_vectors_stay_apart() {
        let e: Vec<_> = (0..5)
            .map(|i| {
                let mut v = vec![0.0; 5];
                v[i] = 1.0;
                emb(i, &v)
            })
            .collect();
        let g = group_clips(&e, &GrouperConfig::default()).unwrap();
        assert_eq!(g.len(), 5);
        assert!(g.iter().enumerate().all(|(i, g)| g.group_id == i && g.member_clip_ids == [i]));
    }

    #[test]
    fn empty_and_unsorted_inputs() {
        assert_eq!(group_clips(&[], &GrouperConfig::default()), Err(GroupError::Empty));
        let e = vec![emb(1, &[1.0]), emb(0, &[1.0])];
        assert!(matches!(group_clips(&e, &GrouperConfig::default()), Err(GroupError::Unsorted { .. })));
        let e = vec![emb(0, &[1.0]), emb(1, &[1.0, 0.0])];
        assert!(matches!(group_clips(&e, &GrouperConfig::default()), Err(GroupError::DimensionMismatch(1, 2))));
    }

    #[test]
    fn centroid_is_refreshed_after_join() {
        // Clip 2 is close to the mean of clips 0 and 1, but not to clip 0 alone.
        let cfg = GrouperConfig {
            tau: 0.9,
            ..GrouperConfig::default()
        };
        let a = [1.0, 0.0];
        let b = [0.92, (1.0f64 - 0.92 * 0.92).sqrt()];
        let c = [0.88, 0.475];
        assert!(cosine(&a, &c).unwrap() < 0.9);
        let g = group_clips(&[emb(0, &a), emb(1, &b), emb(2, &c)], &cfg).unwrap();
        assert_eq!(g.len(), 1, "{g:?}");
        assert!((norm(&g[0].centroid) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gate_boundaries() {
        let cfg = GrouperConfig::default();
        let groups = |n: usize| -> Vec<ClipGroup> {
            (0..n)
                .map(|i| ClipGroup {
                    group_id: i,
                    member_clip_ids: vec![i],
                    centroid: vec![1.0],
                })
                .collect()
        };
        assert_eq!(gate_group_count(&groups(3), &cfg), GroupGate::RejectSparse);
        assert_eq!(gate_group_count(&groups(4), &cfg), GroupGate::Keep);
        assert_eq!(gate_group_count(&groups(32), &cfg), GroupGate::Keep);
        assert_eq!(gate_group_count(&groups(33), &cfg), GroupGate::RejectComplex);
    }

    #[test]
    fn histogram_of_solid_colours() {
        let red = histogram_embedding(&Frame::solid(4, 4, [255, 0, 0]));
        let green = histogram_embedding(&Frame::solid(4, 4, [0, 255, 0]));
        assert_eq!(red.len(), HISTOGRAM_DIM);
        assert!((norm(&red) - 1.0).abs() < 1e-12);
        // Shares only the blue-channel bin: cosine = 1/3.
        assert!((cosine(&red, &green).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn sidecar_parsing() {
        let p = Path::new("x.emb");
        let e = parse_embedding_sidecar("dim=2\n1: 0,2\n0: 3,4\n", p).unwrap();
        assert_eq!(e[0].clip_id, 0);
        assert!((e[0].vector[0] - 0.6).abs() < 1e-12);
        assert_eq!(e[1].vector, vec![0.0, 1.0]);
        assert!(parse_embedding_sidecar("dim=3\n0: 1,2\n", p).is_err());
        assert!(parse_embedding_sidecar("0: 1,2\n", p).is_err());
        assert!(parse_embedding_sidecar("dim=2\n0: 0,0\n", p).is_err());
        assert!(parse_embedding_sidecar("dim=2\n0 1,2\n", p).is_err());
    }

    fn random_unit(rng: &mut SplitMix64, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
            if let Some(u) = normalize(&v) {
                return u;
            }
        }
    }

    #[test]
    fn tau_extremes() {
        let mut rng = SplitMix64::new(11);
        let mut e: Vec<_> = (0..8).map(|i| ClipEmbedding::new(i, random_unit(&mut rng, 6)).unwrap()).collect();
        let all = GrouperConfig {
            tau: -1.0,
            ..GrouperConfig::default()
        };
        assert_eq!(group_clips(&e, &all).unwrap().len(), 1);
        // tau = 1 groups exact duplicates only.
        e[5].vector = e[2].vector.clone();
        let strict = GrouperConfig {
            tau: 1.0,
            ..GrouperConfig::default()
        };
        let g = group_clips(&e, &strict).unwrap();
        assert_eq!(g.len(), 7);
        assert!(g.iter().any(|g| g.member_clip_ids == [2, 5]));
    }

    proptest! {
        #[test]
        fn grouping_is_a_partition_and_rotation_invariant(seed in any::<u64>(), n in 1usize..12, dim in 2usize..8, tau in -0.5f64..0.99) {
            let mut rng = SplitMix64::new(seed);
            let e: Vec<_> = (0..n).map(|i| ClipEmbedding::new(i, random_unit(&mut rng, dim)).unwrap()).collect();
            let cfg = GrouperConfig { tau, ..GrouperConfig::default() };
            let g = group_clips(&e, &cfg).unwrap();
            let mut ids: Vec<usize> = g.iter().flat_map(|g| g.member_clip_ids.clone()).collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..n).collect::<Vec<_>>());
            prop_assert!(g.iter().all(|g| !g.member_clip_ids.is_empty()));

            // Permuting coordinates identically for every clip is an orthonormal map.
            let mut perm: Vec<usize> = (0..dim).collect();
            rng.shuffle(&mut perm);
            let permuted: Vec<_> = e.iter().map(|x| ClipEmbedding {
                clip_id: x.clip_id,
                vector: perm.iter().map(|&p| x.vector[p]).collect(),
            }).collect();
            let gp = group_clips(&permuted, &cfg).unwrap();
            let members = |g: &[ClipGroup]| g.iter().map(|g| g.member_clip_ids.clone()).collect::<Vec<_>>();
            prop_assert_eq!(members(&g), members(&gp));
            prop_assert_eq!(group_clips(&e, &cfg).unwrap(), g);
        }
    }
}
