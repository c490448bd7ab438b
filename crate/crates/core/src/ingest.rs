//! Corpus manifest loading and fixed-rate frame acquisition.
//!
//! Frames come either from a directory of pre-extracted `frame_%06d.png`
//! (or `.jpg`) images, or from an external decoder command that writes such a
//! directory. No codec is linked in-process.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed manifest record: {msg}")]
    MalformedLine { path: PathBuf, line: usize, msg: String },
    #[error("duplicate video_id {0:?} in manifest")]
    DuplicateId(String),
    #[error("unreadable source {path}: {msg}")]
    UnreadableSource { path: PathBuf, msg: String },
    #[error("decoder failed for {video_id} (exit code {code:?}): {stderr}")]
    Decoder {
        video_id: String,
        code: Option<i32>,
        stderr: String,
    },
    #[error("no frames produced for {0}")]
    NoFrames(String),
    #[error("invalid ingest config: {0}")]
    Config(String),
}

/// One line of the corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub video_id: String,
    pub source: String,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps_native: Option<f64>,
}

impl VideoEntry {
    /// Duration bucket label used for per-source reporting, e.g. `"1-2m"`.
    pub fn bucket(&self) -> String {
        let m = (self.duration_s / 60.0).floor().max(0.0) as u64;
        format!("{}-{}m", m, m + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub sample_fps: f64,
    pub max_pixels: u64,
    pub max_frames: usize,
    pub duration_window_s: [f64; 2],
    /// Shell command with `{input}`, `{fps}` and `{outdir}` placeholders. Used
    /// when a manifest source is a file rather than a frame directory.
    pub decoder_command: Option<String>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            sample_fps: 2.0,
            max_pixels: 90_000,
            max_frames: 100,
            duration_window_s: [60.0, 180.0],
            decoder_command: None,
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        if !(self.sample_fps > 0.0 && self.sample_fps.is_finite()) {
            return Err(IngestError::Config("sample_fps must be > 0".into()));
        }
        if self.max_pixels < 1 {
            return Err(IngestError::Config("max_pixels must be >= 1".into()));
        }
        if self.max_frames < 2 {
            return Err(IngestError::Config("max_frames must be >= 2".into()));
        }
        let [lo, hi] = self.duration_window_s;
        if !(lo <= hi) {
            return Err(IngestError::Config("duration_window_s must be [min, max] with min <= max".into()));
        }
        Ok(())
    }

    pub fn in_window(&self, duration_s: f64) -> bool {
        let [lo, hi] = self.duration_window_s;
        duration_s >= lo && duration_s <= hi
    }
}

/// 8-bit RGB frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub timestamp_s: f64,
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(index: usize, timestamp_s: f64, width: u32, height: u32, data: Vec<u8>) -> Self {
        assert!(width >= 1 && height >= 1, "frame dimensions must be positive");
        assert_eq!(data.len(), width as usize * height as usize * 3, "RGB buffer length");
        Self {
            index,
            timestamp_s,
            width,
            height,
            data,
        }
    }

    /// Frame filled with a single color.
    pub fn solid(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        Self::new(0, 0.0, width, height, data)
    }

    pub fn pixel_count(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub video_id: String,
    pub frames: Vec<Frame>,
    pub sample_fps: f64,
}

impl FrameSequence {
    /// Builds a sequence, re-indexing frames and stamping `k / sample_fps`.
    pub fn from_frames(video_id: impl Into<String>, frames: Vec<Frame>, sample_fps: f64) -> Self {
        let frames = frames
            .into_iter()
            .enumerate()
            .map(|(k, mut f)| {
                f.index = k;
                f.timestamp_s = k as f64 / sample_fps;
                f
            })
            .collect();
        Self {
            video_id: video_id.into(),
            frames,
            sample_fps,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Reads a line-delimited manifest. Blank lines are skipped.
pub fn load_manifest(path: &Path) -> Result<Vec<VideoEntry>, IngestError> {
    let file = fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |msg: String| IngestError::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let entry: VideoEntry = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if entry.video_id.is_empty() {
            return Err(malformed("empty video_id".into()));
        }
        if !(entry.duration_s > 0.0 && entry.duration_s.is_finite()) {
            return Err(malformed(format!("duration_s must be > 0, got {}", entry.duration_s)));
        }
        if !seen.insert(entry.video_id.clone()) {
            return Err(IngestError::DuplicateId(entry.video_id));
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Splits entries into those inside the configured duration window and those outside.
pub fn split_by_duration(entries: Vec<VideoEntry>, cfg: &IngestConfig) -> (Vec<VideoEntry>, Vec<VideoEntry>) {
    entries.into_iter().partition(|e| cfg.in_window(e.duration_s))
}

/// Target dimensions for a pixel budget: the largest `w' <= s*w`, `h' <= s*h`
/// with `s = sqrt(max_pixels / (w*h))`, computed in exact integer arithmetic
/// and clamped to at least 1.
pub fn downscale_dims(width: u32, height: u32, max_pixels: u64) -> (u32, u32) {
    let (w, h) = (u64::from(width), u64::from(height));
    if w * h <= max_pixels {
        return (width, height);
    }
    // floor(s*w) is the largest n with n^2 * h <= max_pixels * w.
    let floor_scaled = |num: u64, den: u64| -> u64 {
        let target = u128::from(max_pixels) * u128::from(num);
        let mut n = ((target as f64 / den as f64).sqrt()) as u128;
        while n * n * u128::from(den) > target {
            n -= 1;
        }
        while (n + 1) * (n + 1) * u128::from(den) <= target {
            n += 1;
        }
        n as u64
    };
    let nh = floor_scaled(h, w).max(1);
    let nw = floor_scaled(w, h).max(1);
    // A side clamped up to one pixel can push the product over budget; the
    // other side then absorbs the difference.
    let nw = nw.min((max_pixels / nh).max(1));
    let nh = nh.min((max_pixels / nw).max(1));
    (nw as u32, nh as u32)
}

/// Shrinks a frame to fit `max_pixels`, preserving aspect ratio. Bilinear
/// resampling with pixel-centre alignment; frames under budget are returned as is.
pub fn downscale_frame(frame: Frame, max_pixels: u64) -> Frame {
    let (nw, nh) = downscale_dims(frame.width, frame.height, max_pixels);
    if (nw, nh) == (frame.width, frame.height) {
        return frame;
    }
    let data = resize_bilinear(&frame, nw, nh);
    Frame::new(frame.index, frame.timestamp_s, nw, nh, data)
}

fn resize_bilinear(src: &Frame, nw: u32, nh: u32) -> Vec<u8> {
    let sx = f64::from(src.width) / f64::from(nw);
    let sy = f64::from(src.height) / f64::from(nh);
    let max_x = f64::from(src.width - 1);
    let max_y = f64::from(src.height - 1);
    let mut out = Vec::with_capacity(nw as usize * nh as usize * 3);
    for y in 0..nh {
        let fy = ((f64::from(y) + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let y0 = fy.floor() as u32;
        let y1 = (y0 + 1).min(src.height - 1);
        let ty = fy - f64::from(y0);
        for x in 0..nw {
            let fx = ((f64::from(x) + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let x0 = fx.floor() as u32;
            let x1 = (x0 + 1).min(src.width - 1);
            let tx = fx - f64::from(x0);
            let (p00, p10, p01, p11) = (src.pixel(x0, y0), src.pixel(x1, y0), src.pixel(x0, y1), src.pixel(x1, y1));
            for c in 0..3 {
                let top = f64::from(p00[c]) * (1.0 - tx) + f64::from(p10[c]) * tx;
                let bottom = f64::from(p01[c]) * (1.0 - tx) + f64::from(p11[c]) * tx;
                let v = top * (1.0 - ty) + bottom * ty;
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

fn frame_index_of(path: &Path) -> Option<usize> {
    let name = path.file_name()?.to_str()?;
    let stem = name.strip_prefix("frame_")?;
    let (digits, ext) = stem.split_once('.')?;
    if !matches!(ext.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg") {
        return None;
    }
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Numbered frame images in `dir`, ordered by index.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let rd = fs::read_dir(dir).map_err(|source| IngestError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    for ent in rd {
        let ent = ent.map_err(|source| IngestError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let p = ent.path();
        if let Some(idx) = frame_index_of(&p) {
            files.push((idx, p));
        }
    }
    files.sort();
    Ok(files.into_iter().map(|(_, p)| p).collect())
}

pub fn read_frame_image(path: &Path) -> Result<(u32, u32, Vec<u8>), IngestError> {
    let img = image::open(path).map_err(|e| IngestError::UnreadableSource {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = img.into_rgb8();
    let (w, h) = rgb.dimensions();
    Ok((w, h, rgb.into_raw()))
}

/// Writes a frame as PNG.
pub fn write_frame_png(frame: &Frame, path: &Path) -> Result<(), IngestError> {
    image::save_buffer(path, &frame.data, frame.width, frame.height, image::ColorType::Rgb8).map_err(|e| {
        IngestError::UnreadableSource {
            path: path.to_path_buf(),
            msg: e.to_string(),
        }
    })
}

/// Selects which directory images to keep. A directory declared at
/// `fps_native` is subsampled to `sample_fps`; without a declared rate it is
/// taken as already sampled.
fn pick_indices(available: usize, fps_native: Option<f64>, cfg: &IngestConfig) -> Vec<usize> {
    let step = match fps_native {
        Some(native) if native > cfg.sample_fps => native / cfg.sample_fps,
        _ => 1.0,
    };
    let mut out = Vec::new();
    for k in 0..cfg.max_frames {
        let idx = (k as f64 * step).floor() as usize;
        if idx >= available {
            break;
        }
        out.push(idx);
    }
    out
}

fn frames_from_dir(
    video_id: &str,
    dir: &Path,
    fps_native: Option<f64>,
    cfg: &IngestConfig,
) -> Result<FrameSequence, IngestError> {
    let files = list_frame_files(dir)?;
    let mut frames = Vec::new();
    for idx in pick_indices(files.len(), fps_native, cfg) {
        let (w, h, data) = read_frame_image(&files[idx])?;
        let frame = Frame::new(0, 0.0, w, h, data);
        frames.push(downscale_frame(frame, cfg.max_pixels));
    }
    if frames.is_empty() {
        return Err(IngestError::NoFrames(video_id.to_string()));
    }
    Ok(FrameSequence::from_frames(video_id, frames, cfg.sample_fps))
}

fn run_decoder(entry: &VideoEntry, template: &str, cfg: &IngestConfig) -> Result<FrameSequence, IngestError> {
    let outdir = std::env::temp_dir().join(format!(
        "temple-forge-frames-{}-{}",
        std::process::id(),
        crate::hash::hex64(crate::hash::fnv1a64(entry.video_id.as_bytes()))
    ));
    let _ = fs::remove_dir_all(&outdir);
    fs::create_dir_all(&outdir).map_err(|source| IngestError::Io {
        path: outdir.clone(),
        source,
    })?;
    let cmd = template
        .replace("{input}", &entry.source)
        .replace("{fps}", &cfg.sample_fps.to_string())
        .replace("{outdir}", &outdir.to_string_lossy());
    let output = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .output()
        .map_err(|e| IngestError::Decoder {
            video_id: entry.video_id.clone(),
            code: None,
            stderr: e.to_string(),
        })?;
    let result = if output.status.success() {
        frames_from_dir(&entry.video_id, &outdir, None, cfg)
    } else {
        Err(IngestError::Decoder {
            video_id: entry.video_id.clone(),
            code: output.status.code(),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        })
    };
    let _ = fs::remove_dir_all(&outdir);
    result
}

/// Samples frames for one video. Relative sources resolve against `base`.
pub fn sample_frames(entry: &VideoEntry, cfg: &IngestConfig, base: Option<&Path>) -> Result<FrameSequence, IngestError> {
    let mut src = PathBuf::from(&entry.source);
    if src.is_relative() {
        if let Some(b) = base {
            src = b.join(src);
        }
    }
    if src.is_dir() {
        return frames_from_dir(&entry.video_id, &src, entry.fps_native, cfg);
    }
    if !src.exists() {
        return Err(IngestError::UnreadableSource {
            path: src,
            msg: "no such file or directory".into(),
        });
    }
    match &cfg.decoder_command {
        Some(t) => {
            let resolved = VideoEntry {
                source: src.to_string_lossy().into_owned(),
                ..entry.clone()
            };
            run_decoder(&resolved, t, cfg)
        }
        None => Err(IngestError::UnreadableSource {
            path: src,
            msg: "source is a file but no decoder_command is configured".into(),
        }),
    }
}
