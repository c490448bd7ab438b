//! Desk-scale preference optimisation: a categorical toy model, the DPO and
//! SFT objectives with analytic gradients, and stage-ordered training.

pub mod data;
pub mod objective;
pub mod plot;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

pub use data::{hash_tokens, synthetic_pairs, token_pairs_from_preferences, ToyDataConfig};
pub use objective::{dpo_grad, dpo_loss, mean_margin, sft_grad, sft_loss};
pub use train::{run_curriculum, train_stage, DpoConfig, LogRecord, Objective, RunLog, RunOrder, StageData, StageLog};

#[derive(Debug, Error, PartialEq)]
pub enum DpoError {
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("token sequence is empty")]
    EmptySequence,
    #[error("context has length {got}, model expects {expected}")]
    ContextLength { got: usize, expected: usize },
    #[error("models differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("invalid model shape: vocab {vocab}, context {context}")]
    BadShape { vocab: usize, context: usize },
    #[error("invalid dpo config: {0}")]
    Config(String),
    #[error("stage {stage} has no training data")]
    EmptyStage { stage: usize },
    #[error("stage levels must be strictly decreasing, got {0:?}")]
    StageOrder(Vec<u32>),
    #[error("non-finite loss {loss} at stage {stage} step {step} (objective {objective}, grad norm {grad_norm})")]
    NonFinite {
        stage: usize,
        step: usize,
        objective: &'static str,
        loss: f64,
        grad_norm: f64,
    },
}

/// Context-conditioned categorical model: every position of a sequence is
/// drawn from `softmax(context^T theta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    vocab: usize,
    context: usize,
    /// Row-major `context x vocab`.
    theta: Vec<f64>,
}

impl ToyModel {
    pub fn zeros(vocab: usize, context: usize) -> Result<Self, DpoError> {
        if vocab < 2 || context < 1 {
            return Err(DpoError::BadShape { vocab, context });
        }
        Ok(Self {
            vocab,
            context,
            theta: vec![0.0; vocab * context],
        })
    }

    /// Parameters uniform in `[-scale, scale)`.
    pub fn random(vocab: usize, context: usize, scale: f64, seed: u64) -> Result<Self, DpoError> {
        let mut m = Self::zeros(vocab, context)?;
        let mut rng = SplitMix64::new(seed);
        for t in &mut m.theta {
            *t = (rng.next_f64() * 2.0 - 1.0) * scale;
        }
        Ok(m)
    }

    pub fn from_theta(vocab: usize, context: usize, theta: Vec<f64>) -> Result<Self, DpoError> {
        if vocab < 2 || context < 1 || theta.len() != vocab * context {
            return Err(DpoError::BadShape { vocab, context });
        }
        Ok(Self { vocab, context, theta })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn context_dim(&self) -> usize {
        self.context
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.context, self.vocab)
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn logits(&self, context: &[f64]) -> Result<Vec<f64>, DpoError> {
        if context.len() != self.context {
            return Err(DpoError::ContextLength {
                got: context.len(),
                expected: self.context,
            });
        }
        let mut z = vec![0.0; self.vocab];
        for (c, &x) in context.iter().enumerate() {
            let row = &self.theta[c * self.vocab..(c + 1) * self.vocab];
            for (zv, &t) in z.iter_mut().zip(row) {
                *zv += x * t;
            }
        }
        Ok(z)
    }

    pub fn log_softmax(&self, context: &[f64]) -> Result<Vec<f64>, DpoError> {
        Ok(log_softmax(&self.logits(context)?))
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<(), DpoError> {
        if tokens.is_empty() {
            return Err(DpoError::EmptySequence);
        }
        match tokens.iter().find(|&&t| t as usize >= self.vocab) {
            Some(&token) => Err(DpoError::TokenOutOfRange { token, vocab: self.vocab }),
            None => Ok(()),
        }
    }

    /// Gradient of `logprob(context, tokens)` added into `out` with weight `w`.
    /// d/dθ[c][v] = context[c] * (count(v) - len * p(v)).
    pub(crate) fn accumulate_logprob_grad(&self, context: &[f64], tokens: &[u32], w: f64, out: &mut [f64]) -> Result<(), DpoError> {
        self.check_tokens(tokens)?;
        let ls = self.log_softmax(context)?;
        let len = tokens.len() as f64;
        let mut coeff: Vec<f64> = ls.iter().map(|l| -len * l.exp()).collect();
        for &t in tokens {
            coeff[t as usize] += 1.0;
        }
        for (c, &x) in context.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &mut out[c * self.vocab..(c + 1) * self.vocab];
            for (o, &k) in row.iter_mut().zip(&coeff) {
                *o += w * x * k;
            }
        }
        Ok(())
    }
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Sum over positions of the token log-probabilities.
pub fn logprob(model: &ToyModel, context: &[f64], tokens: &[u32]) -> Result<f64, DpoError> {
    model.check_tokens(tokens)?;
    let ls = model.log_softmax(context)?;
    Ok(tokens.iter().map(|&t| ls[t as usize]).sum())
}

/// A preference pair mapped onto the toy domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenPair {
    pub context: Vec<f64>,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
    pub r: u32,
}
