//! Two keyframes per clip, picked near the one-third and two-thirds anchors
//! by Laplacian-variance sharpness.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grouper::Clip;
use crate::ingest::{Frame, FrameSequence};
use crate::segmenter::SceneBoundary;

#[derive(Debug, Error, PartialEq)]
pub enum KeyframeError {
    #[error("frame is {0}x{1}; the Laplacian needs at least 3x3")]
    TooSmall(u32, u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    OneThird,
    TwoThirds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub clip_id: usize,
    pub frame_index: usize,
    pub anchor: Anchor,
    pub sharpness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyframerConfig {
    /// Search radius in sampled frames around each anchor.
    pub window_frames: usize,
}

impl Default for KeyframerConfig {
    fn default() -> Self {
        Self { window_frames: 2 }
    }
}

/// Rec. 601 luma.
pub fn grayscale(frame: &Frame) -> Vec<f64> {
    frame
        .data
        .chunks_exact(3)
        .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
        .collect()
}

/// Population variance of the 4-neighbour Laplacian over interior pixels.
pub fn laplacian_variance(frame: &Frame) -> Result<f64, KeyframeError> {
    let (w, h) = (frame.width as usize, frame.height as usize);
    if w < 3 || h < 3 {
        return Err(KeyframeError::TooSmall(frame.width, frame.height));
    }
    let g = grayscale(frame);
    let n = ((w - 2) * (h - 2)) as f64;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = y * w + x;
            let r = g[c - w] + g[c + w] + g[c - 1] + g[c + 1] - 4.0 * g[c];
            sum += r;
            sq += r * r;
        }
    }
    let mean = sum / n;
    Ok((sq / n - mean * mean).max(0.0))
}

pub fn anchor_indices(scene: &SceneBoundary) -> (usize, usize) {
    let len = scene.frame_count();
    let clamp = |i: usize| i.clamp(scene.start_frame, scene.end_frame);
    (clamp(scene.start_frame + len / 3), clamp(scene.start_frame + 2 * len / 3))
}

fn best_in_window(
    seq: &FrameSequence,
    scene: &SceneBoundary,
    anchor: usize,
    radius: usize,
) -> Result<(usize, f64), KeyframeError> {
    let lo = anchor.saturating_sub(radius).max(scene.start_frame);
    let hi = (anchor + radius).min(scene.end_frame);
    let mut best: Option<(usize, f64)> = None;
    for i in lo..=hi {
        let s = laplacian_variance(&seq.frames[i])?;
        // strict comparison keeps the smallest index on ties
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    Ok(best.expect("window is never empty"))
}

pub fn select_keyframes(
    seq: &FrameSequence,
    clip: &Clip,
    cfg: &KeyframerConfig,
) -> Result<(Keyframe, Keyframe), KeyframeError> {
    let (a1, a2) = anchor_indices(&clip.scene);
    let (i1, s1) = best_in_window(seq, &clip.scene, a1, cfg.window_frames)?;
    let (i2, s2) = best_in_window(seq, &clip.scene, a2, cfg.window_frames)?;
    Ok((
        Keyframe {
            clip_id: clip.clip_id,
            frame_index: i1,
            anchor: Anchor::OneThird,
            sharpness: s1,
        },
        Keyframe {
            clip_id: clip.clip_id,
            frame_index: i2,
            anchor: Anchor::TwoThirds,
            sharpness: s2,
        },
    ))
}

/// 3x3 box blur with edge clamping.
pub fn box_blur(frame: &Frame) -> Frame {
    let (w, h) = (frame.width as i64, frame.height as i64);
    let mut out = Vec::with_capacity(frame.data.len());
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0u32;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let sx = (x + dx).clamp(0, w - 1) as u32;
                        let sy = (y + dy).clamp(0, h - 1) as u32;
                        acc += u32::from(frame.pixel(sx, sy)[c]);
                    }
                }
                out.push(((acc + 4) / 9) as u8);
            }
        }
    }
    Frame::new(frame.index, frame.timestamp_s, frame.width, frame.height, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouper::make_clips;

    fn checker(w: u32, h: u32, cell: u32) -> Frame {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let v = if ((x / cell) + (y / cell)) % 2 == 0 { 230 } else { 20 };
                data.extend([v, v, v]);
            }
        }
        Frame::new(0, 0.0, w, h, data)
    }

    /// Independent evaluation: explicit 3x3 kernel, two-pass variance.
    fn oracle_variance(f: &Frame) -> f64 {
        let k = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
        let luma = |x: u32, y: u32| {
            let p = f.pixel(x, y);
            0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
        };
        let mut resp = Vec::new();
        for y in 1..f.height - 1 {
            for x in 1..f.width - 1 {
                let mut r = 0.0;
                for (j, row) in k.iter().enumerate() {
                    for (i, kv) in row.iter().enumerate() {
                        r += kv * luma(x + i as u32 - 1, y + j as u32 - 1);
                    }
                }
                resp.push(r);
            }
        }
        let mean = resp.iter().sum::<f64>() / resp.len() as f64;
        resp.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / resp.len() as f64
    }

    #[test]
    fn constant_frame_scores_zero() {
        assert_eq!(laplacian_variance(&Frame::solid(9, 7, [40, 90, 200])).unwrap(), 0.0);
    }

    #[test]
    fn checkerboard_beats_its_blur() {
        let sharp = checker(16, 16, 2);
        let blurred = box_blur(&sharp);
        let (vs, vb) = (oracle_variance(&sharp), oracle_variance(&blurred));
        assert!(vs > vb);
        assert!((laplacian_variance(&sharp).unwrap() - vs).abs() < 1e-6 * vs);
        assert!((laplacian_variance(&blurred).unwrap() - vb).abs() < 1e-6 * vs);
    }

    #[test]
    fn single_bright_pixel() {
        let mut f = Frame::solid(5, 5, [0, 0, 0]);
        let i = (2 * 5 + 2) * 3;
        f.data[i..i + 3].copy_from_slice(&[255, 255, 255]);
        let v = laplacian_variance(&f).unwrap();
        assert!(v > 0.0);
        assert!((v - oracle_variance(&f)).abs() < 1e-9);
    }

    #[test]
    fn too_small_frame() {
        assert_eq!(laplacian_variance(&Frame::solid(2, 5, [0; 3])), Err(KeyframeError::TooSmall(2, 5)));
    }

    #[test]
    fn flips_do_not_change_score() {
        let mut f = checker(7, 5, 1);
        f.data[0] = 3;
        f.data[40] = 250;
        let flip_h = {
            let mut d = Vec::new();
            for y in 0..f.height {
                for x in (0..f.width).rev() {
                    d.extend(f.pixel(x, y));
                }
            }
            Frame::new(0, 0.0, f.width, f.height, d)
        };
        let flip_v = {
            let mut d = Vec::new();
            for y in (0..f.height).rev() {
                for x in 0..f.width {
                    d.extend(f.pixel(x, y));
                }
            }
            Frame::new(0, 0.0, f.width, f.height, d)
        };
        let v = laplacian_variance(&f).unwrap();
        assert!((laplacian_variance(&flip_h).unwrap() - v).abs() < 1e-9);
        assert!((laplacian_variance(&flip_v).unwrap() - v).abs() < 1e-9);
    }

    #[test]
    fn anchors() {
        assert_eq!(anchor_indices(&SceneBoundary::new(0, 0, 23, 2.0)), (8, 16));
        assert_eq!(anchor_indices(&SceneBoundary::new(0, 0, 0, 2.0)), (0, 0));
        assert_eq!(anchor_indices(&SceneBoundary::new(0, 10, 19, 2.0)), (13, 16));
        assert_eq!(anchor_indices(&SceneBoundary::new(0, 4, 5, 2.0)), (4, 5));
    }

    fn clip_seq(frames: Vec<Frame>) -> (FrameSequence, Clip) {
        let n = frames.len();
        let seq = FrameSequence::from_frames("v", frames, 2.0);
        let clip = make_clips(&[SceneBoundary::new(0, 0, n - 1, 2.0)])[0];
        (seq, clip)
    }

    #[test]
    fn equal_sharpness_takes_window_start() {
        let (seq, clip) = clip_seq(vec![checker(8, 8, 1); 24]);
        let (k1, k2) = select_keyframes(&seq, &clip, &KeyframerConfig::default()).unwrap();
        assert_eq!((k1.frame_index, k2.frame_index), (6, 14));
        assert_eq!((k1.anchor, k2.anchor), (Anchor::OneThird, Anchor::TwoThirds));
    }

    #[test]
    fn blurred_anchor_loses_to_sharp_neighbour() {
        let sharp = checker(8, 8, 1);
        let blurry = box_blur(&box_blur(&sharp));
        let mut frames = vec![blurry.clone(); 24];
        frames[9] = sharp.clone();
        frames[17] = sharp;
        let (seq, clip) = clip_seq(frames);
        let (k1, k2) = select_keyframes(&seq, &clip, &KeyframerConfig::default()).unwrap();
        assert_eq!(k1.frame_index, 9);
        assert_eq!(k2.frame_index, 17);
    }

    #[test]
    fn zero_window_returns_anchors() {
        let mut frames = vec![checker(8, 8, 1); 24];
        frames[8] = Frame::solid(8, 8, [5; 3]);
        let (seq, clip) = clip_seq(frames);
        let (k1, k2) = select_keyframes(&seq, &clip, &KeyframerConfig { window_frames: 0 }).unwrap();
        assert_eq!((k1.frame_index, k2.frame_index), (8, 16));
        assert_eq!(k1.sharpness, 0.0);
    }

    #[test]
    fn window_clipped_to_scene() {
        let seq = FrameSequence::from_frames("v", vec![checker(8, 8, 1); 30], 2.0);
        let clip = make_clips(&[SceneBoundary::new(0, 10, 12, 2.0)])[0];
        let (k1, k2) = select_keyframes(&seq, &clip, &KeyframerConfig { window_frames: 5 }).unwrap();
        assert_eq!((k1.frame_index, k2.frame_index), (10, 10));
    }
}
