//! Selection funnel: how many videos survive each step, per source bucket.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    /// Manifest filters and frame acquisition; failures count against step 1.
    Ingest,
    /// Scene detection and scene filters (step 1).
    Scenes,
    /// Similarity grouping gate (step 2).
    Groups,
    /// Keyframe extraction (step 3).
    Keyframes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    Passed,
    Rejected,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum PipelineEvent {
    Video {
        video_id: String,
        source: String,
        step: Step,
        outcome: StepOutcome,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
    Pairs {
        level: u32,
        count: usize,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum FunnelError {
    #[error("video {video_id} passed {step:?} without passing the step before it")]
    Inconsistent { video_id: String, step: Step },
    #[error("conflicting pair counts for level {0}")]
    ConflictingPairs(u32),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelRow {
    pub source: String,
    pub original: usize,
    pub after_step1: usize,
    pub after_step2: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelReport {
    pub rows: Vec<FunnelRow>,
    pub total: FunnelRow,
    pub pairs_per_level: BTreeMap<u32, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub fn funnel_stats(events: &[PipelineEvent]) -> Result<FunnelReport, FunnelError> {
    let mut source_of: BTreeMap<&str, &str> = BTreeMap::new();
    let mut step1: BTreeSet<&str> = BTreeSet::new();
    let mut step2: BTreeSet<&str> = BTreeSet::new();
    let mut pairs = BTreeMap::new();
    for ev in events {
        match ev {
            PipelineEvent::Video {
                video_id,
                source,
                step,
                outcome,
                ..
            } => {
                source_of.entry(video_id).or_insert(source);
                if *outcome == StepOutcome::Passed {
                    match step {
                        Step::Scenes => {
                            step1.insert(video_id);
                        }
                        Step::Groups => {
                            step2.insert(video_id);
                        }
                        Step::Ingest | Step::Keyframes => {}
                    }
                }
            }
            PipelineEvent::Pairs { level, count } => {
                if let Some(prev) = pairs.insert(*level, *count) {
                    if prev != *count {
                        return Err(FunnelError::ConflictingPairs(*level));
                    }
                }
            }
        }
    }
    if let Some(v) = step2.difference(&step1).next() {
        return Err(FunnelError::Inconsistent {
            video_id: v.to_string(),
            step: Step::Groups,
        });
    }
    let mut rows: BTreeMap<&str, FunnelRow> = BTreeMap::new();
    for (vid, src) in &source_of {
        let row = rows.entry(src).or_insert_with(|| FunnelRow {
            source: src.to_string(),
            ..FunnelRow::default()
        });
        row.original += 1;
        row.after_step1 += usize::from(step1.contains(vid));
        row.after_step2 += usize::from(step2.contains(vid));
    }
    let rows: Vec<FunnelRow> = rows.into_values().collect();
    let total = FunnelRow {
        source: "Total".into(),
        original: rows.iter().map(|r| r.original).sum(),
        after_step1: rows.iter().map(|r| r.after_step1).sum(),
        after_step2: rows.iter().map(|r| r.after_step2).sum(),
    };
    Ok(FunnelReport {
        rows,
        total,
        pairs_per_level: pairs,
        config_hash: None,
    })
}

impl FunnelReport {
    /// Aligned plain-text table: one row per source, a rule, then the total.
    pub fn render(&self) -> String {
        let headers = ["", "Original", "After Step 1", "After Step 2"];
        let mut width0 = headers[0].len().max(self.total.source.len());
        for r in &self.rows {
            width0 = width0.max(r.source.len());
        }
        let widths = [width0, headers[1].len(), headers[2].len(), headers[3].len()];
        let line = |cells: [String; 4]| -> String {
            format!(
                "{:<w0$} | {:>w1$} | {:>w2$} | {:>w3$}\n",
                cells[0],
                cells[1],
                cells[2],
                cells[3],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            )
        };
        let rule = format!(
            "{}-+-{}-+-{}-+-{}\n",
            "-".repeat(widths[0]),
            "-".repeat(widths[1]),
            "-".repeat(widths[2]),
            "-".repeat(widths[3])
        );
        let row = |r: &FunnelRow| {
            line([
                r.source.clone(),
                r.original.to_string(),
                r.after_step1.to_string(),
                r.after_step2.to_string(),
            ])
        };
        let mut out = line(headers.map(String::from));
        out.push_str(&rule);
        for r in &self.rows {
            out.push_str(&row(r));
        }
        out.push_str(&rule);
        out.push_str(&row(&self.total));
        if !self.pairs_per_level.is_empty() {
            out.push('\n');
            out.push_str("Pairs per level:");
            for (r, n) in self.pairs_per_level.iter().rev() {
                let _ = write!(out, " r={r}: {n}");
            }
            out.push('\n');
        }
        out
    }
}
