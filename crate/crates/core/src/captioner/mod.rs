//! Contextualised clip captioning, global aggregation and chosen/rejected
//! response generation.
//!
//! Clean clip captions are produced once per video, each conditioned on the
//! previous clip's keyframes and caption. Rejected responses reuse those
//! captions: only the aggregation step is re-run on the perturbed list.

pub mod backend;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{
    BackendError, CaptionBackend, CaptionRequest, MockBackend, RemoteBackend, RequestKind, RetryPolicy, Retrying,
    SubprocessBackend,
};

use crate::grouper::Clip;
use crate::ingest::Frame;
use crate::perturber::{self, PerturbError, PerturbationSpec, PerturbedSequence};

/// Environment variable that overrides the remote endpoint.
pub const BACKEND_URL_ENV: &str = "TEMPLE_FORGE_BACKEND_URL";

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error("caption ids {captions:?} do not match perturbation input {expected:?}")]
    IdMismatch {
        captions: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("clip {0} has no keyframes")]
    MissingKeyframes(usize),
    #[error("nothing to aggregate")]
    NoCaptions,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipCaption {
    pub clip_id: usize,
    pub text: String,
    pub context_clip_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponsePair {
    pub instruction: String,
    pub chosen: String,
    pub rejected: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PairOutcome {
    Pair(ResponsePair),
    /// Rejected text came out identical to the chosen one.
    Skipped { reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    Mock,
    Remote,
    Subprocess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub mode: BackendMode,
    pub endpoint: Option<String>,
    /// Subprocess template with `{request}` and `{response}` placeholders.
    pub command: Option<String>,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub backoff_initial_s: f64,
    pub concurrency_limit: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            mode: BackendMode::Mock,
            endpoint: None,
            command: None,
            timeout_s: 120.0,
            max_retries: 3,
            backoff_initial_s: 1.0,
            concurrency_limit: 4,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(BackendError::Config("timeout_s must be > 0".into()));
        }
        if !(self.backoff_initial_s >= 0.0 && self.backoff_initial_s.is_finite()) {
            return Err(BackendError::Config("backoff_initial_s must be >= 0".into()));
        }
        if self.concurrency_limit == 0 {
            return Err(BackendError::Config("concurrency_limit must be >= 1".into()));
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            initial_backoff: Duration::from_secs_f64(self.backoff_initial_s),
        }
    }

    /// Builds the configured backend wrapped in the retry policy.
    pub fn build(&self) -> Result<Box<dyn CaptionBackend>, BackendError> {
        self.validate()?;
        let timeout = Duration::from_secs_f64(self.timeout_s);
        let policy = self.retry_policy();
        Ok(match self.mode {
            BackendMode::Mock => Box::new(Retrying::new(MockBackend, policy)),
            BackendMode::Remote => {
                let url = std::env::var(BACKEND_URL_ENV)
                    .ok()
                    .filter(|u| !u.is_empty())
                    .or_else(|| self.endpoint.clone())
                    .ok_or_else(|| BackendError::Config(format!("remote mode needs `endpoint` or ${BACKEND_URL_ENV}")))?;
                Box::new(Retrying::new(RemoteBackend::new(url, timeout), policy))
            }
            BackendMode::Subprocess => {
                let cmd = self
                    .command
                    .clone()
                    .ok_or_else(|| BackendError::Config("subprocess mode needs `command`".into()))?;
                Box::new(Retrying::new(SubprocessBackend::new(cmd, timeout), policy))
            }
        })
    }
}

/// Prompt templates. Placeholders: `{clip_id}`, `{prev_caption}`, `{captions}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub clip_initial: String,
    pub clip_contextual: String,
    pub aggregate: String,
    pub instruction: String,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            clip_initial: "The two images are keyframes of the opening clip of a video. \
                           Describe in detail what happens in this clip."
                .into(),
            clip_contextual: "The first two images are keyframes of the previous clip, described as: \
                              \"{prev_caption}\". The last two images are keyframes of the clip that follows it. \
                              Using the previous clip as context, describe in detail what happens in the \
                              following clip only."
                .into(),
            aggregate: "Below are descriptions of consecutive clips of one video, in playback order.\n\
                        {captions}\n\
                        Combine them into a single detailed, well-organised description of the whole video \
                        that keeps the order of events."
                .into(),
            instruction: "Describe this video in detail.".into(),
        }
    }
}

fn numbered(captions: &[String]) -> String {
    captions
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {c}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// A clip together with the pixel data of its two keyframes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipKeyframes {
    pub clip: Clip,
    pub frames: [Frame; 2],
}

/// Captions `cur`, using `prev` and its caption as context when present.
pub fn caption_clip(
    prev: Option<(&ClipKeyframes, &str)>,
    cur: &ClipKeyframes,
    backend: &dyn CaptionBackend,
    prompts: &PromptConfig,
) -> Result<ClipCaption, CaptionError> {
    let mut images = Vec::with_capacity(4);
    let (kind, prompt, context) = match prev {
        None => (RequestKind::ClipInitial, prompts.clip_initial.clone(), None),
        Some((p, caption)) => {
            images.extend(p.frames.iter().cloned());
            let prompt = prompts.clip_contextual.replace("{prev_caption}", caption);
            (RequestKind::ClipContextual, prompt, Some(p.clip.clip_id))
        }
    };
    images.extend(cur.frames.iter().cloned());
    let req = CaptionRequest {
        kind,
        prompt: prompt.replace("{clip_id}", &cur.clip.clip_id.to_string()),
        images,
        clip_id: Some(cur.clip.clip_id),
        captions: Vec::new(),
    };
    let text = backend.complete(&req)?;
    if text.trim().is_empty() {
        return Err(BackendError::EmptyResponse.into());
    }
    Ok(ClipCaption {
        clip_id: cur.clip.clip_id,
        text,
        context_clip_id: context,
    })
}

/// The request `aggregate_captions` sends; exposed so callers can inspect payloads.
pub fn aggregate_request(captions: &[ClipCaption], prompts: &PromptConfig) -> CaptionRequest {
    let texts: Vec<String> = captions.iter().map(|c| c.text.clone()).collect();
    CaptionRequest {
        kind: RequestKind::Aggregate,
        prompt: prompts.aggregate.replace("{captions}", &numbered(&texts)),
        images: Vec::new(),
        clip_id: None,
        captions: texts,
    }
}

pub fn aggregate_captions(
    captions: &[ClipCaption],
    backend: &dyn CaptionBackend,
    prompts: &PromptConfig,
) -> Result<String, CaptionError> {
    if captions.is_empty() {
        return Err(CaptionError::NoCaptions);
    }
    let text = backend.complete(&aggregate_request(captions, prompts))?;
    if text.trim().is_empty() {
        return Err(BackendError::EmptyResponse.into());
    }
    Ok(text)
}

/// Re-selects and re-orders clean captions to follow a perturbation.
pub fn perturb_caption_list(
    captions: &[ClipCaption],
    perturbed: &PerturbedSequence,
) -> Result<Vec<ClipCaption>, CaptionError> {
    let ids: Vec<usize> = captions.iter().map(|c| c.clip_id).collect();
    if ids != perturbed.original_clip_ids {
        return Err(CaptionError::IdMismatch {
            captions: ids,
            expected: perturbed.original_clip_ids.clone(),
        });
    }
    perturbed
        .output_clip_ids
        .iter()
        .map(|id| {
            captions
                .iter()
                .find(|c| c.clip_id == *id)
                .cloned()
                .ok_or_else(|| CaptionError::IdMismatch {
                    captions: ids.clone(),
                    expected: perturbed.original_clip_ids.clone(),
                })
        })
        .collect()
}

/// Clean captions of a curated video plus its clean (chosen) summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionedVideo {
    pub video_id: String,
    pub clips: Vec<Clip>,
    pub captions: Vec<ClipCaption>,
    pub clean_summary: String,
}

/// Captions every clip in order, then aggregates once: `N + 1` backend calls.
pub fn caption_video(
    video_id: &str,
    clips: &[ClipKeyframes],
    backend: &dyn CaptionBackend,
    prompts: &PromptConfig,
) -> Result<CaptionedVideo, CaptionError> {
    let mut captions: Vec<ClipCaption> = Vec::with_capacity(clips.len());
    for (i, cur) in clips.iter().enumerate() {
        let prev = if i == 0 {
            None
        } else {
            Some((&clips[i - 1], captions[i - 1].text.as_str()))
        };
        captions.push(caption_clip(prev, cur, backend, prompts)?);
    }
    let clean_summary = aggregate_captions(&captions, backend, prompts)?;
    Ok(CaptionedVideo {
        video_id: video_id.to_string(),
        clips: clips.iter().map(|c| c.clip).collect(),
        captions,
        clean_summary,
    })
}

/// Chosen = the clean summary; rejected = aggregation of the perturbed caption list.
pub fn generate_response_pair(
    video: &CaptionedVideo,
    spec: &PerturbationSpec,
    backend: &dyn CaptionBackend,
    prompts: &PromptConfig,
) -> Result<PairOutcome, CaptionError> {
    let perturbed = perturber::apply(&video.clips, spec)?;
    let rejected_captions = perturb_caption_list(&video.captions, &perturbed)?;
    let rejected = aggregate_captions(&rejected_captions, backend, prompts)?;
    if rejected == video.clean_summary {
        return Ok(PairOutcome::Skipped {
            reason: format!(
                "{} {} r={}: rejected response identical to chosen",
                video.video_id, spec.kind, spec.r
            ),
        });
    }
    Ok(PairOutcome::Pair(ResponsePair {
        instruction: prompts.instruction.clone(),
        chosen: video.clean_summary.clone(),
        rejected,
    }))
}
