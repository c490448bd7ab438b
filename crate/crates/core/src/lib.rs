//! Preference-pair generation for video captioning models.

pub mod captioner;
pub mod cli;
pub mod config;
pub mod dpo;
pub mod fixture;
pub mod grouper;
pub mod hash;
pub mod ingest;
pub mod keyframer;
pub mod pairset;
pub mod perturber;
pub mod pipeline;
pub mod rng;
pub mod segmenter;
