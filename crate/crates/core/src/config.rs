//! The single TOML configuration file and its flag overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::captioner::{BackendConfig, PromptConfig};
use crate::dpo::{DpoConfig, ToyDataConfig};
use crate::grouper::GrouperConfig;
use crate::hash::{fnv1a64, hex64};
use crate::ingest::IngestConfig;
use crate::keyframer::KeyframerConfig;
use crate::pairset::{normalize_levels, PairsetConfig};
use crate::perturber::PerturbationKind;
use crate::segmenter::SegmenterConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {msg}")]
    Schema { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Corpus manifest (line-delimited `VideoEntry` records).
    pub manifest: PathBuf,
    /// Root for every artifact the pipeline writes.
    pub output_dir: PathBuf,
    /// Optional directory of `<video_id>.txt` boundary files that replace
    /// the built-in detector.
    pub boundaries_dir: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.jsonl"),
            output_dir: PathBuf::from("out"),
            boundaries_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturberConfig {
    pub levels: Vec<u32>,
    pub kinds: Vec<PerturbationKind>,
    pub global_seed: u64,
}

impl Default for PerturberConfig {
    fn default() -> Self {
        Self {
            levels: vec![16, 8, 4, 2],
            kinds: PerturbationKind::ALL.to_vec(),
            global_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionerConfig {
    pub backend: BackendConfig,
    pub prompts: PromptConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub ingest: IngestConfig,
    pub segmenter: SegmenterConfig,
    pub grouper: GrouperConfig,
    pub keyframer: KeyframerConfig,
    pub perturber: PerturberConfig,
    pub captioner: CaptionerConfig,
    pub pairset: PairsetConfig,
    pub dpo: DpoConfig,
    pub toy: ToyDataConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

impl PipelineConfig {
    /// Parses TOML; relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path, origin: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Schema {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })?;
        cfg.resolve_paths(base_dir);
        cfg.validate().map_err(|msg| ConfigError::Schema {
            path: origin.to_path_buf(),
            msg,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base, path)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.manifest);
        fix(&mut self.paths.output_dir);
        if let Some(p) = self.paths.boundaries_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.grouper.embeddings_dir.as_mut() {
            fix(p);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.perturber.global_seed = seed;
            self.dpo.seed = seed;
        }
        if let Some(dir) = &o.output_dir {
            self.paths.output_dir = dir.clone();
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.ingest.validate().map_err(|e| e.to_string())?;
        self.segmenter.validate().map_err(|e| e.to_string())?;
        self.grouper.validate().map_err(|e| e.to_string())?;
        self.captioner.backend.validate().map_err(|e| e.to_string())?;
        self.dpo.validate().map_err(|e| e.to_string())?;
        self.toy.validate().map_err(|e| e.to_string())?;
        normalize_levels(&self.perturber.levels).map_err(|e| e.to_string())?;
        if self.perturber.kinds.is_empty() {
            return Err("perturber.kinds must not be empty".into());
        }
        if self.keyframer.window_frames > 1000 {
            return Err("keyframer.window_frames is unreasonably large".into());
        }
        if self.pairset.steps_per_stage == 0 {
            return Err("pairset.steps_per_stage must be >= 1".into());
        }
        Ok(())
    }

    /// Hash of every setting that can change pipeline outputs. Paths are
    /// excluded so the same settings hash equally wherever they run.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
            if let Some(g) = obj.get_mut("grouper").and_then(|g| g.as_object_mut()) {
                g.remove("embeddings_dir");
            }
        }
        // serde_json maps are key-sorted, so this text is canonical.
        hex64(fnv1a64(v.to_string().as_bytes()))
    }

    pub fn curated_path(&self) -> PathBuf {
        self.paths.output_dir.join("curated.jsonl")
    }

    pub fn events_path(&self) -> PathBuf {
        self.paths.output_dir.join("events.jsonl")
    }

    pub fn captions_path(&self) -> PathBuf {
        self.paths.output_dir.join("captions.jsonl")
    }

    pub fn caption_failures_path(&self) -> PathBuf {
        self.paths.output_dir.join("caption_failures.jsonl")
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.paths.output_dir.join("dataset")
    }
}
