//! Toy-domain training data: separable synthetic pairs and a hashing
//! tokenizer for smoke runs on real datasets.

use serde::{Deserialize, Serialize};

use super::{DpoError, TokenPair};
use crate::hash::fnv1a64;
use crate::pairset::PreferencePair;
use crate::perturber::ceil_div;
use crate::rng::derive_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDataConfig {
    pub vocab_size: usize,
    pub context_dim: usize,
    pub pairs_per_level: usize,
    pub seq_len: usize,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            context_dim: 4,
            pairs_per_level: 32,
            seq_len: 6,
        }
    }
}

impl ToyDataConfig {
    pub fn validate(&self) -> Result<(), DpoError> {
        if self.context_dim == 0 || self.vocab_size < 2 * self.context_dim {
            return Err(DpoError::Config(format!(
                "vocab_size ({}) must be at least twice context_dim ({})",
                self.vocab_size, self.context_dim
            )));
        }
        if self.pairs_per_level == 0 || self.seq_len < 2 {
            return Err(DpoError::Config("pairs_per_level must be >= 1 and seq_len >= 2".into()));
        }
        Ok(())
    }
}

/// Separable pairs for difficulty `r`. The lower half of the vocabulary is
/// split into one block of "on-topic" tokens per context class; the chosen
/// sequence draws from its class block. The rejected sequence keeps
/// `ceil(len / r)` chosen positions and fills the rest with tokens from the
/// upper half, so smaller `r` gives harder (closer) pairs.
pub fn synthetic_pairs(cfg: &ToyDataConfig, r: u32, seed: u64) -> Result<Vec<TokenPair>, DpoError> {
    cfg.validate()?;
    if r < 2 {
        return Err(DpoError::Config(format!("difficulty level must be >= 2, got {r}")));
    }
    let mut rng = derive_rng(seed, "toy", "synthetic", r);
    let (v, c, len) = (cfg.vocab_size, cfg.context_dim, cfg.seq_len);
    let half = v / 2;
    let block = half / c;
    let keep = ceil_div(len, r);
    Ok((0..cfg.pairs_per_level)
        .map(|i| {
            let class = i % c;
            let mut context = vec![0.0; c];
            context[class] = 1.0;
            let chosen: Vec<u32> = (0..len)
                .map(|_| (class * block + rng.below(block as u64) as usize) as u32)
                .collect();
            let mut positions: Vec<usize> = (0..len).collect();
            rng.shuffle(&mut positions);
            let mut rejected = chosen.clone();
            for &p in &positions[keep..] {
                rejected[p] = (half + rng.below((v - half) as u64) as usize) as u32;
            }
            TokenPair { context, chosen, rejected, r }
        })
        .collect())
}

/// Whitespace tokens mapped to `fnv1a64(token) mod vocab`. Not semantic; only
/// for pushing real datasets through the toy harness.
pub fn hash_tokens(text: &str, vocab: usize) -> Vec<u32> {
    text.split_whitespace()
        .map(|t| (fnv1a64(t.as_bytes()) % vocab as u64) as u32)
        .collect()
}

/// Maps dataset records into the toy domain; the context is a one-hot of the
/// hashed instruction.
pub fn token_pairs_from_preferences(pairs: &[PreferencePair], vocab: usize, context_dim: usize) -> Result<Vec<TokenPair>, DpoError> {
    if vocab < 2 || context_dim == 0 {
        return Err(DpoError::BadShape { vocab, context: context_dim });
    }
    pairs
        .iter()
        .map(|p| {
            let chosen = hash_tokens(&p.chosen, vocab);
            let rejected = hash_tokens(&p.rejected, vocab);
            if chosen.is_empty() || rejected.is_empty() {
                return Err(DpoError::EmptySequence);
            }
            let mut context = vec![0.0; context_dim];
            context[(fnv1a64(p.instruction.as_bytes()) % context_dim as u64) as usize] = 1.0;
            Ok(TokenPair { context, chosen, rejected, r: p.r })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejected_keeps_ceil_len_over_r_tokens() {
        let cfg = ToyDataConfig::default();
        for r in [2, 4, 8, 16] {
            let pairs = synthetic_pairs(&cfg, r, 1).unwrap();
            assert_eq!(pairs.len(), 32);
            for p in &pairs {
                let same = p.chosen.iter().zip(&p.rejected).filter(|(a, b)| a == b).count();
                assert_eq!(same, ceil_div(6, r));
                assert!(p.chosen.iter().all(|&t| t < 8));
                assert_ne!(p.chosen, p.rejected);
                assert_eq!(p.r, r);
            }
        }
    }

    #[test]
    fn deterministic_per_seed_and_level() {
        let cfg = ToyDataConfig::default();
        assert_eq!(synthetic_pairs(&cfg, 4, 9).unwrap(), synthetic_pairs(&cfg, 4, 9).unwrap());
        assert_ne!(synthetic_pairs(&cfg, 4, 9).unwrap(), synthetic_pairs(&cfg, 4, 10).unwrap());
    }

    #[test]
    fn config_checks() {
        let bad = ToyDataConfig { vocab_size: 6, context_dim: 4, ..ToyDataConfig::default() };
        assert!(synthetic_pairs(&bad, 4, 0).is_err());
        assert!(synthetic_pairs(&ToyDataConfig::default(), 1, 0).is_err());
    }

    #[test]
    fn hashing_tokenizer() {
        let ids = hash_tokens("a b  a", 7);
        assert_eq!(ids.len(), 3);
        assert_eq!(ids[0], ids[2]);
        assert_eq!(ids[0] as u64, fnv1a64(b"a") % 7);
        assert!(hash_tokens("   ", 7).is_empty());
    }
}
