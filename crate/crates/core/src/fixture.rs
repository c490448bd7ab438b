//! Synthetic corpus with engineered selection outcomes: 20 videos, of which
//! 5 fail step 1 and 3 more fail step 2, leaving 12.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::ingest::{write_frame_png, Frame, IngestError, VideoEntry};

pub const WIDTH: u32 = 48;
pub const HEIGHT: u32 = 32;
pub const FRAMES_PER_VIDEO: usize = 100;
const LEVELS: [u8; 4] = [32, 96, 160, 224];
const TEXTURE: u8 = 16;

type Color = [usize; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    Pass,
    OutOfWindow,
    LongScene,
    Sparse,
    Complex,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixtureVideo {
    pub video_id: String,
    pub duration_s: f64,
    /// Length in frames of each scene, in order.
    pub scenes: Vec<usize>,
    /// Number of distinct scene colours, which is the group count.
    pub colors: usize,
    pub expect: Expectation,
}

/// `(scene count, distinct colours, duration)` per video in manifest order.
fn plan() -> Vec<FixtureVideo> {
    use Expectation::*;
    let even = |n: usize| -> Vec<usize> { (0..n).map(|i| FRAMES_PER_VIDEO / n + usize::from(i < FRAMES_PER_VIDEO % n)).collect() };
    let long = |n: usize| -> Vec<usize> {
        let mut v = vec![34];
        let rest = FRAMES_PER_VIDEO - 34;
        v.extend((0..n - 1).map(|i| rest / (n - 1) + usize::from(i < rest % (n - 1))));
        v
    };
    let specs: Vec<(Vec<usize>, usize, f64, Expectation)> = vec![
        (even(5), 4, 75.0, Pass),
        (even(6), 5, 130.0, Pass),
        (even(8), 4, 95.0, Pass),
        (even(10), 6, 150.0, Pass),
        (long(5), 4, 110.0, LongScene),
        (even(7), 7, 62.0, Pass),
        (even(4), 4, 45.0, OutOfWindow),
        (even(12), 9, 170.0, Pass),
        (even(6), 3, 88.0, Sparse),
        (even(9), 5, 125.0, Pass),
        (even(5), 5, 140.0, Pass),
        (long(6), 5, 100.0, LongScene),
        (even(34), 34, 160.0, Complex),
        (even(11), 8, 70.0, Pass),
        (even(6), 2, 115.0, Sparse),
        (even(8), 8, 200.0, OutOfWindow),
        (even(16), 10, 178.0, Pass),
        (long(4), 4, 66.0, LongScene),
        (even(5), 4, 105.0, Pass),
        (even(20), 12, 135.0, Pass),
    ];
    specs
        .into_iter()
        .enumerate()
        .map(|(i, (scenes, colors, duration_s, expect))| FixtureVideo {
            video_id: format!("vid{i:02}"),
            duration_s,
            scenes,
            colors,
            expect,
        })
        .collect()
}

pub fn fixture_plan() -> Vec<FixtureVideo> {
    plan()
}

fn level_distance(a: Color, b: Color) -> usize {
    (0..3).map(|c| a[c].abs_diff(b[c])).sum()
}

/// A cyclic sequence of `k` distinct palette colours whose neighbours
/// (including last to first) are at least four level steps apart, which
/// keeps every scene change above the default cut threshold.
pub fn cyclic_palette(k: usize) -> Vec<Color> {
    let all: Vec<Color> = (0..64).map(|i| [i / 16, (i / 4) % 4, i % 4]).collect();
    fn extend(all: &[Color], seq: &mut Vec<Color>, used: &mut [bool], k: usize) -> bool {
        if seq.len() == k {
            return k < 2 || level_distance(seq[k - 1], seq[0]) >= 4;
        }
        for i in 0..all.len() {
            if used[i] || seq.last().is_some_and(|&p| level_distance(p, all[i]) < 4) {
                continue;
            }
            used[i] = true;
            seq.push(all[i]);
            if extend(all, seq, used, k) {
                return true;
            }
            seq.pop();
            used[i] = false;
        }
        false
    }
    let mut seq = Vec::with_capacity(k);
    let mut used = vec![false; all.len()];
    assert!(extend(&all, &mut seq, &mut used, k), "no palette of {k} colours");
    seq
}

/// A textured frame: 4x4 checkerboard blocks brightened by a fixed amount,
/// with pixel (0, 0) carrying a per-scene marker so scenes of the same colour
/// still differ slightly.
pub fn scene_frame(color: Color, marker: u8) -> Frame {
    let mut data = Vec::with_capacity((WIDTH * HEIGHT * 3) as usize);
    for y in 0..HEIGHT {
        for x in 0..WIDTH {
            let bump = if ((x / 4) + (y / 4)) % 2 == 0 { TEXTURE } else { 0 };
            for c in color {
                data.push(LEVELS[c] + bump);
            }
        }
    }
    data[0] = marker;
    Frame::new(0, 0.0, WIDTH, HEIGHT, data)
}

pub fn video_frames(v: &FixtureVideo) -> Vec<Frame> {
    let palette = cyclic_palette(v.colors);
    let mut frames = Vec::with_capacity(FRAMES_PER_VIDEO);
    for (j, &len) in v.scenes.iter().enumerate() {
        let f = scene_frame(palette[j % v.colors], (j * 7 + 1) as u8);
        frames.extend(std::iter::repeat_n(f, len));
    }
    frames
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureCorpus {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub config: PathBuf,
    pub videos: Vec<FixtureVideo>,
}

pub const FIXTURE_CONFIG: &str = "\
[paths]
manifest = \"manifest.jsonl\"
output_dir = \"out\"

[perturber]
levels = [16, 8, 4, 2]
global_seed = 7

[captioner.backend]
mode = \"mock\"
";

/// Writes frames, manifest and a ready-to-use config under `root`.
pub fn write_fixture(root: &Path) -> Result<FixtureCorpus, IngestError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| IngestError::Io { path, source }
    };
    let videos = plan();
    let mut manifest = String::new();
    for v in &videos {
        let dir = root.join("frames").join(&v.video_id);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        for (i, f) in video_frames(v).iter().enumerate() {
            write_frame_png(f, &dir.join(format!("frame_{i:06}.png")))?;
        }
        let entry = VideoEntry {
            video_id: v.video_id.clone(),
            source: format!("frames/{}", v.video_id),
            duration_s: v.duration_s,
            fps_native: None,
        };
        manifest.push_str(&serde_json::to_string(&entry).expect("entry serialises"));
        manifest.push('\n');
    }
    let manifest_path = root.join("manifest.jsonl");
    fs::write(&manifest_path, manifest).map_err(io(&manifest_path))?;
    let config = root.join("config.toml");
    fs::write(&config, FIXTURE_CONFIG).map_err(io(&config))?;
    Ok(FixtureCorpus {
        root: root.to_path_buf(),
        manifest: manifest_path,
        config,
        videos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::frame_difference;

    #[test]
    fn plan_has_engineered_counts() {
        let p = plan();
        assert_eq!(p.len(), 20);
        let count = |e| p.iter().filter(|v| v.expect == e).count();
        assert_eq!(count(Expectation::Pass), 12);
        assert_eq!(count(Expectation::OutOfWindow) + count(Expectation::LongScene), 5);
        assert_eq!(count(Expectation::Sparse) + count(Expectation::Complex), 3);
        for v in &p {
            assert_eq!(v.scenes.iter().sum::<usize>(), FRAMES_PER_VIDEO, "{}", v.video_id);
            assert!(v.colors <= v.scenes.len());
            let longest = *v.scenes.iter().max().unwrap();
            assert_eq!(longest > 32, v.expect == Expectation::LongScene, "{}", v.video_id);
        }
    }

    #[test]
    fn palette_neighbours_cut_and_colours_distinct() {
        for k in 2..=34 {
            let p = cyclic_palette(k);
            for i in 0..k {
                let (a, b) = (p[i], p[(i + 1) % k]);
                assert!(frame_difference(&scene_frame(a, 1), &scene_frame(b, 2)) >= 0.30);
            }
            let mut q = p.clone();
            q.sort();
            q.dedup();
            assert_eq!(q.len(), k);
        }
    }
}
