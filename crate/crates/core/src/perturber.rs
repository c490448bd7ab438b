//! Difficulty-controlled temporal perturbations of an ordered clip list.
//!
//! For `N` clips and difficulty factor `r`:
//! * drop keeps `ceil(N / r)` clips, chosen uniformly, in temporal order;
//! * shuffle and reverse split the clips into `max(2, ceil(N / r))`
//!   contiguous groups and permute whole groups.
//!
//! Larger `r` means a coarser, more obvious perturbation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::grouper::Clip;
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Error, PartialEq)]
pub enum PerturbError {
    #[error("cannot perturb an empty clip list")]
    Empty,
    #[error("{kind} needs at least 2 clips, got {n}")]
    TooFewClips { kind: PerturbationKind, n: usize },
    #[error("difficulty factor must be >= 2, got {0}")]
    BadFactor(u32),
    #[error("unknown perturbation kind {0:?}")]
    UnknownKind(String),
    #[error("spec kind {got} passed to {expected}")]
    KindMismatch {
        expected: PerturbationKind,
        got: PerturbationKind,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    Drop,
    Shuffle,
    Reverse,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 3] = [Self::Drop, Self::Shuffle, Self::Reverse];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Drop => "drop",
            Self::Shuffle => "shuffle",
            Self::Reverse => "reverse",
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbationKind {
    type Err = PerturbError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "drop" => Ok(Self::Drop),
            "shuffle" => Ok(Self::Shuffle),
            "reverse" => Ok(Self::Reverse),
            other => Err(PerturbError::UnknownKind(other.to_string())),
        }
    }
}

/// Fully determines one perturbation. `seed` is the already-derived stream
/// seed (see [`PerturbationSpec::derive`]); it serialises as a decimal string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub r: u32,
    #[serde(serialize_with = "ser_u64_str", deserialize_with = "de_u64_str")]
    pub seed: u64,
}

fn ser_u64_str<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&v.to_string())
}

fn de_u64_str<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, r: u32, seed: u64) -> Result<Self, PerturbError> {
        if r < 2 {
            return Err(PerturbError::BadFactor(r));
        }
        Ok(Self { kind, r, seed })
    }

    /// Spec whose seed is derived from the run seed and the video/kind/level.
    pub fn derive(global_seed: u64, video_id: &str, kind: PerturbationKind, r: u32) -> Result<Self, PerturbError> {
        Self::new(kind, r, derive_seed(global_seed, video_id, kind.as_str(), r))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbedSequence {
    pub original_clip_ids: Vec<usize>,
    pub output_clip_ids: Vec<usize>,
    pub spec: PerturbationSpec,
    /// Group sizes in original order; empty for drop.
    pub group_boundaries: Vec<usize>,
}

impl PerturbedSequence {
    /// Output split back into its indivisible units (each kept clip is its
    /// own unit for drop).
    pub fn output_groups(&self) -> Vec<Vec<usize>> {
        if self.group_boundaries.is_empty() {
            return self.output_clip_ids.iter().map(|&id| vec![id]).collect();
        }
        let mut groups = Vec::new();
        let mut start = 0;
        for &size in &self.group_boundaries {
            groups.push(self.original_clip_ids[start..start + size].to_vec());
            start += size;
        }
        let mut out = Vec::with_capacity(groups.len());
        let mut pos = 0;
        while pos < self.output_clip_ids.len() {
            let g = groups
                .iter()
                .find(|g| g[0] == self.output_clip_ids[pos])
                .expect("output starts a group at every unit boundary");
            out.push(g.clone());
            pos += g.len();
        }
        out
    }
}

pub fn ceil_div(n: usize, r: u32) -> usize {
    n.div_ceil(r as usize)
}

/// Number of indivisible groups for `n` clips at difficulty `r`.
pub fn group_count(n: usize, r: u32) -> usize {
    match n {
        0 => 0,
        1 => 1,
        _ => ceil_div(n, r).max(2),
    }
}

/// Balanced group sizes: the first `n mod g` groups get one extra clip.
pub fn group_sizes(n: usize, r: u32) -> Vec<usize> {
    let g = group_count(n, r);
    if g == 0 {
        return Vec::new();
    }
    let (base, extra) = (n / g, n % g);
    (0..g).map(|i| base + usize::from(i < extra)).collect()
}

pub fn partition_groups(clips: &[Clip], r: u32) -> Vec<Vec<Clip>> {
    let mut out = Vec::new();
    let mut start = 0;
    for size in group_sizes(clips.len(), r) {
        out.push(clips[start..start + size].to_vec());
        start += size;
    }
    out
}

fn ids(clips: &[Clip]) -> Vec<usize> {
    clips.iter().map(|c| c.clip_id).collect()
}

fn check_kind(spec: &PerturbationSpec, expected: PerturbationKind) -> Result<(), PerturbError> {
    if spec.kind != expected {
        return Err(PerturbError::KindMismatch { expected, got: spec.kind });
    }
    if spec.r < 2 {
        return Err(PerturbError::BadFactor(spec.r));
    }
    Ok(())
}

pub fn drop_clips(clips: &[Clip], spec: &PerturbationSpec) -> Result<PerturbedSequence, PerturbError> {
    check_kind(spec, PerturbationKind::Drop)?;
    if clips.is_empty() {
        return Err(PerturbError::Empty);
    }
    let n = clips.len();
    let keep = ceil_div(n, spec.r);
    let mut rng = SplitMix64::new(spec.seed);
    // Fisher-Yates prefix: the first `keep` slots end up a uniform sample.
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..keep {
        let j = i + rng.below((n - i) as u64) as usize;
        idx.swap(i, j);
    }
    let mut chosen = idx[..keep].to_vec();
    chosen.sort_unstable();
    Ok(PerturbedSequence {
        original_clip_ids: ids(clips),
        output_clip_ids: chosen.into_iter().map(|i| clips[i].clip_id).collect(),
        spec: *spec,
        group_boundaries: Vec::new(),
    })
}

fn reorder(clips: &[Clip], spec: &PerturbationSpec, order: &[usize]) -> PerturbedSequence {
    let groups = partition_groups(clips, spec.r);
    PerturbedSequence {
        original_clip_ids: ids(clips),
        output_clip_ids: order.iter().flat_map(|&g| ids(&groups[g])).collect(),
        spec: *spec,
        group_boundaries: groups.iter().map(Vec::len).collect(),
    }
}

pub fn shuffle_groups(clips: &[Clip], spec: &PerturbationSpec) -> Result<PerturbedSequence, PerturbError> {
    check_kind(spec, PerturbationKind::Shuffle)?;
    if clips.len() < 2 {
        return Err(PerturbError::TooFewClips {
            kind: spec.kind,
            n: clips.len(),
        });
    }
    let g = group_count(clips.len(), spec.r);
    let mut rng = SplitMix64::new(spec.seed);
    let identity: Vec<usize> = (0..g).collect();
    let mut order = identity.clone();
    loop {
        rng.shuffle(&mut order);
        if order != identity {
            break;
        }
    }
    Ok(reorder(clips, spec, &order))
}

pub fn reverse_groups(clips: &[Clip], spec: &PerturbationSpec) -> Result<PerturbedSequence, PerturbError> {
    check_kind(spec, PerturbationKind::Reverse)?;
    if clips.len() < 2 {
        return Err(PerturbError::TooFewClips {
            kind: spec.kind,
            n: clips.len(),
        });
    }
    let order: Vec<usize> = (0..group_count(clips.len(), spec.r)).rev().collect();
    Ok(reorder(clips, spec, &order))
}

pub fn apply(clips: &[Clip], spec: &PerturbationSpec) -> Result<PerturbedSequence, PerturbError> {
    match spec.kind {
        PerturbationKind::Drop => drop_clips(clips, spec),
        PerturbationKind::Shuffle => shuffle_groups(clips, spec),
        PerturbationKind::Reverse => reverse_groups(clips, spec),
    }
}

/// Placeholder clips `0..n` for callers that only care about ids.
pub fn synthetic_clips(n: usize) -> Vec<Clip> {
    use crate::segmenter::SceneBoundary;
    (0..n)
        .map(|i| Clip {
            clip_id: i,
            scene: SceneBoundary::new(i, i, i, 1.0),
            middle_frame: i,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(kind: PerturbationKind, r: u32, seed: u64) -> PerturbationSpec {
        PerturbationSpec::new(kind, r, seed).unwrap()
    }

    #[test]
    fn drop_counts() {
        let c = synthetic_clips(8);
        assert_eq!(drop_clips(&c, &spec(PerturbationKind::Drop, 2, 1)).unwrap().output_clip_ids.len(), 4);
        let c = synthetic_clips(5);
        assert_eq!(drop_clips(&c, &spec(PerturbationKind::Drop, 16, 1)).unwrap().output_clip_ids.len(), 1);
        assert_eq!(drop_clips(&[], &spec(PerturbationKind::Drop, 2, 1)), Err(PerturbError::Empty));
    }

    #[test]
    fn drop_is_deterministic() {
        let c = synthetic_clips(4);
        let s = spec(PerturbationKind::Drop, 2, 77);
        assert_eq!(drop_clips(&c, &s).unwrap(), drop_clips(&c, &s).unwrap());
    }

    #[test]
    fn drop_is_roughly_uniform() {
        let c = synthetic_clips(6);
        let mut hits = [0usize; 6];
        for seed in 0..6000 {
            for id in drop_clips(&c, &spec(PerturbationKind::Drop, 3, seed)).unwrap().output_clip_ids {
                hits[id] += 1;
            }
        }
        // each clip kept with probability 1/3 -> 2000 expected
        assert!(hits.iter().all(|&h| (1800..2200).contains(&h)), "{hits:?}");
    }

    #[test]
    fn partition_shapes() {
        let sizes = |n, r| partition_groups(&synthetic_clips(n), r).iter().map(Vec::len).collect::<Vec<_>>();
        assert_eq!(sizes(8, 2), [2, 2, 2, 2]);
        assert_eq!(sizes(9, 2), [2, 2, 2, 2, 1]);
        assert_eq!(sizes(8, 16), [4, 4]);
        assert_eq!(sizes(1, 2), [1]);
        assert_eq!(sizes(3, 16), [2, 1]);
        let flat: Vec<usize> = partition_groups(&synthetic_clips(11), 4).concat().iter().map(|c| c.clip_id).collect();
        assert_eq!(flat, (0..11).collect::<Vec<_>>());
    }

    #[test]
    fn two_groups_always_swap() {
        for seed in 0..50 {
            let out = shuffle_groups(&synthetic_clips(2), &spec(PerturbationKind::Shuffle, 2, seed)).unwrap();
            assert_eq!(out.output_clip_ids, [1, 0]);
        }
    }

    #[test]
    fn shuffle_keeps_pairs_contiguous() {
        for seed in 0..100 {
            let out = shuffle_groups(&synthetic_clips(8), &spec(PerturbationKind::Shuffle, 2, seed)).unwrap();
            assert_eq!(out.group_boundaries, [2, 2, 2, 2]);
            for pair in out.output_clip_ids.chunks(2) {
                assert_eq!(pair[0] % 2, 0);
                assert_eq!(pair[1], pair[0] + 1);
            }
            assert_ne!(out.output_clip_ids, (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn reverse_examples() {
        let out = reverse_groups(&synthetic_clips(8), &spec(PerturbationKind::Reverse, 2, 0)).unwrap();
        assert_eq!(out.output_clip_ids, [6, 7, 4, 5, 2, 3, 0, 1]);
        let out = reverse_groups(&synthetic_clips(2), &spec(PerturbationKind::Reverse, 16, 0)).unwrap();
        assert_eq!(out.output_clip_ids, [1, 0]);
        assert!(matches!(
            reverse_groups(&synthetic_clips(1), &spec(PerturbationKind::Reverse, 2, 0)),
            Err(PerturbError::TooFewClips { n: 1, .. })
        ));
        assert!(matches!(
            shuffle_groups(&synthetic_clips(1), &spec(PerturbationKind::Shuffle, 2, 0)),
            Err(PerturbError::TooFewClips { n: 1, .. })
        ));
    }

    #[test]
    fn dispatch_and_kind_checks() {
        let c = synthetic_clips(8);
        let d = spec(PerturbationKind::Drop, 2, 5);
        assert_eq!(apply(&c, &d).unwrap(), drop_clips(&c, &d).unwrap());
        let r = spec(PerturbationKind::Reverse, 2, 5);
        assert_eq!(apply(&c, &r).unwrap(), reverse_groups(&c, &r).unwrap());
        assert!(matches!(drop_clips(&c, &r), Err(PerturbError::KindMismatch { .. })));
        assert_eq!(PerturbationSpec::new(PerturbationKind::Drop, 1, 0), Err(PerturbError::BadFactor(1)));
    }

    #[test]
    fn unknown_kind_rejected_at_parse() {
        assert_eq!("twist".parse::<PerturbationKind>(), Err(PerturbError::UnknownKind("twist".into())));
        let bad = r#"{"kind": "twist", "r": 2, "seed": "1"}"#;
        assert!(serde_json::from_str::<PerturbationSpec>(bad).is_err());
    }

    #[test]
    fn spec_wire_format() {
        let s = spec(PerturbationKind::Shuffle, 4, u64::MAX);
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"{"kind":"shuffle","r":4,"seed":"18446744073709551615"}"#);
        assert_eq!(serde_json::from_str::<PerturbationSpec>(&j).unwrap(), s);
    }

    #[test]
    fn derived_specs_differ_per_level() {
        let a = PerturbationSpec::derive(1, "v", PerturbationKind::Drop, 2).unwrap();
        let b = PerturbationSpec::derive(1, "v", PerturbationKind::Drop, 4).unwrap();
        assert_ne!(a.seed, b.seed);
        assert_eq!(a.seed, derive_seed(1, "v", "drop", 2));
    }

    proptest! {
        #[test]
        fn drop_retention_monotone_in_r(n in 1usize..200) {
            let counts: Vec<usize> = [2u32, 4, 8, 16].iter().map(|&r| ceil_div(n, r)).collect();
            prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn reverse_is_an_involution(n in 2usize..80, r in 2u32..20) {
            let clips = synthetic_clips(n);
            let s = spec(PerturbationKind::Reverse, r, 0);
            let once = reverse_groups(&clips, &s).unwrap();
            prop_assert_ne!(&once.output_clip_ids, &once.original_clip_ids);
            // Reversing the unit order again restores the input.
            let mut units = once.output_groups();
            units.reverse();
            prop_assert_eq!(units.concat(), (0..n).collect::<Vec<_>>());
            // With equal-sized groups the clip-level operation is itself an involution.
            if n % group_count(n, r) == 0 {
                let reordered: Vec<Clip> = once.output_clip_ids.iter().map(|&i| clips[i]).collect();
                let twice = reverse_groups(&reordered, &s).unwrap();
                prop_assert_eq!(twice.output_clip_ids, (0..n).collect::<Vec<_>>());
            }
        }
    }
}
