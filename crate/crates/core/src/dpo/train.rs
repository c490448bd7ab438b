//! Plain gradient-descent training and stage ordering.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::objective::{evaluate, reference_ratios};
use super::{DpoError, TokenPair, ToyModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub steps_per_stage: usize,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            learning_rate: 1e-2,
            steps_per_stage: 500,
            seed: 0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), DpoError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(DpoError::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(DpoError::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.steps_per_stage == 0 {
            return Err(DpoError::Config("steps_per_stage must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Dpo,
    Sft,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dpo => "dpo",
            Self::Sft => "sft",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOrder {
    DpoThenSft,
    SftThenDpo,
    SftOnly,
    DpoOnly,
}

impl RunOrder {
    pub const ALL: [RunOrder; 4] = [Self::DpoThenSft, Self::SftThenDpo, Self::SftOnly, Self::DpoOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::DpoThenSft => "dpo_then_sft",
            Self::SftThenDpo => "sft_then_dpo",
            Self::SftOnly => "sft_only",
            Self::DpoOnly => "dpo_only",
        }
    }
}

impl fmt::Display for RunOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RunOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| format!("unknown run order {s:?}"))
    }
}

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: usize,
    pub step: usize,
    pub objective: String,
    pub loss: f64,
    pub margin: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageLog {
    pub stage: usize,
    /// Difficulty level of the stage data; `None` for a stage over all levels.
    pub r: Option<u32>,
    pub objective: Objective,
    pub records: Vec<LogRecord>,
    /// Mean reward margin after the last update.
    pub final_margin: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunLog {
    pub order: RunOrder,
    pub stages: Vec<StageLog>,
}

impl RunLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in self.stages.iter().flat_map(|s| &s.records) {
            out.push_str(&serde_json::to_string(rec).expect("log record serialises"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageData {
    pub r: u32,
    pub pairs: Vec<TokenPair>,
}

/// Full-batch gradient descent for `cfg.steps_per_stage` steps. Each record
/// holds the loss, margin and gradient norm at the parameters before that
/// step's update.
pub fn train_stage(
    mut model: ToyModel,
    data: &[TokenPair],
    objective: Objective,
    cfg: &DpoConfig,
    reference: &ToyModel,
    stage: usize,
    r: Option<u32>,
) -> Result<(ToyModel, StageLog), DpoError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DpoError::EmptyStage { stage });
    }
    if model.shape() != reference.shape() {
        return Err(DpoError::ShapeMismatch(model.shape(), reference.shape()));
    }
    let ratios = reference_ratios(reference, data)?;
    let sft = objective == Objective::Sft;
    let mut records = Vec::with_capacity(cfg.steps_per_stage);
    for step in 0..cfg.steps_per_stage {
        let (loss, grad, margin) = evaluate(&model, &ratios, data, cfg.beta, sft)?;
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(DpoError::NonFinite {
                stage,
                step,
                objective: objective.as_str(),
                loss,
                grad_norm,
            });
        }
        records.push(LogRecord {
            stage,
            step,
            objective: objective.as_str().into(),
            loss,
            margin,
            grad_norm,
        });
        for (t, g) in model.theta_mut().iter_mut().zip(&grad) {
            *t -= cfg.learning_rate * g;
        }
    }
    let (final_loss, _, final_margin) = evaluate(&model, &ratios, data, cfg.beta, sft)?;
    Ok((
        model,
        StageLog {
            stage,
            r,
            objective,
            records,
            final_margin,
            final_loss,
        },
    ))
}

/// Runs the curriculum in `order`. DPO phases train one stage per level in
/// the given (strictly decreasing) order; SFT phases train on the chosen
/// sides of every level at once, except under `sft_only` where SFT follows
/// the per-level stages. The reference model is the initial model, frozen.
pub fn run_curriculum(model: ToyModel, stages: &[StageData], order: RunOrder, cfg: &DpoConfig) -> Result<RunLog, DpoError> {
    cfg.validate()?;
    if stages.is_empty() {
        return Err(DpoError::EmptyStage { stage: 0 });
    }
    let levels: Vec<u32> = stages.iter().map(|s| s.r).collect();
    if levels.windows(2).any(|w| w[0] <= w[1]) {
        return Err(DpoError::StageOrder(levels));
    }
    if let Some(i) = stages.iter().position(|s| s.pairs.is_empty()) {
        return Err(DpoError::EmptyStage { stage: i });
    }
    let reference = model.clone();
    let pooled: Vec<TokenPair> = stages.iter().flat_map(|s| s.pairs.iter().cloned()).collect();

    enum Phase<'a> {
        Level(&'a StageData, Objective),
        Pooled(Objective),
    }
    let curriculum = |obj| stages.iter().map(move |s| Phase::Level(s, obj));
    let phases: Vec<Phase> = match order {
        RunOrder::DpoOnly => curriculum(Objective::Dpo).collect(),
        RunOrder::SftOnly => curriculum(Objective::Sft).collect(),
        RunOrder::DpoThenSft => curriculum(Objective::Dpo).chain([Phase::Pooled(Objective::Sft)]).collect(),
        RunOrder::SftThenDpo => [Phase::Pooled(Objective::Sft)].into_iter().chain(curriculum(Objective::Dpo)).collect(),
    };

    let mut model = model;
    let mut logs = Vec::with_capacity(phases.len());
    for (i, phase) in phases.into_iter().enumerate() {
        let (data, objective, r) = match phase {
            Phase::Level(s, o) => (s.pairs.as_slice(), o, Some(s.r)),
            Phase::Pooled(o) => (pooled.as_slice(), o, None),
        };
        let (next, log) = train_stage(model, data, objective, cfg, &reference, i, r)?;
        model = next;
        logs.push(log);
    }
    Ok(RunLog { order, stages: logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpo::data::{synthetic_pairs, ToyDataConfig};

    fn stages(levels: &[u32]) -> Vec<StageData> {
        let dc = ToyDataConfig::default();
        levels
            .iter()
            .map(|&r| StageData { r, pairs: synthetic_pairs(&dc, r, 3).unwrap() })
            .collect()
    }

    fn model() -> ToyModel {
        let dc = ToyDataConfig::default();
        ToyModel::random(dc.vocab_size, dc.context_dim, 0.01, 5).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let cfg = DpoConfig { learning_rate: 0.0, steps_per_stage: 20, ..DpoConfig::default() };
        let m = model();
        let data = &stages(&[4])[0].pairs;
        let (after, log) = train_stage(m.clone(), data, Objective::Dpo, &cfg, &m, 0, Some(4)).unwrap();
        assert_eq!(after, m);
        assert!(log.records.iter().all(|r| r.loss == log.records[0].loss && r.margin == 0.0));
    }

    #[test]
    fn dpo_increases_margin() {
        let cfg = DpoConfig::default();
        let m = model();
        let data = &stages(&[2])[0].pairs;
        let (_, log) = train_stage(m.clone(), data, Objective::Dpo, &cfg, &m, 0, Some(2)).unwrap();
        assert_eq!(log.records.len(), 500);
        assert_eq!(log.records[0].margin, 0.0);
        assert!(log.final_margin > 0.0);
        assert!(log.final_loss < std::f64::consts::LN_2);
    }

    #[test]
    fn dpo_only_preserves_stage_order() {
        let cfg = DpoConfig { steps_per_stage: 50, ..DpoConfig::default() };
        let log = run_curriculum(model(), &stages(&[16, 8, 4, 2]), RunOrder::DpoOnly, &cfg).unwrap();
        let rs: Vec<_> = log.stages.iter().map(|s| s.r).collect();
        assert_eq!(rs, [Some(16), Some(8), Some(4), Some(2)]);
        assert!(log.stages.iter().all(|s| s.objective == Objective::Dpo));
    }

    #[test]
    fn orders_share_a_schema() {
        let cfg = DpoConfig { steps_per_stage: 10, ..DpoConfig::default() };
        let st = stages(&[16, 8, 4, 2]);
        let a = run_curriculum(model(), &st, RunOrder::DpoThenSft, &cfg).unwrap();
        let b = run_curriculum(model(), &st, RunOrder::SftThenDpo, &cfg).unwrap();
        assert_eq!(a.stages.len(), 5);
        assert_eq!(b.stages.len(), 5);
        assert_eq!(a.stages[4].objective, Objective::Sft);
        assert_eq!(b.stages[0].objective, Objective::Sft);
        for line in a.to_jsonl().lines().chain(b.to_jsonl().lines()) {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
            assert_eq!(keys.len(), 6);
        }
        let s = run_curriculum(model(), &st, RunOrder::SftOnly, &cfg).unwrap();
        assert!(s.stages.iter().all(|s| s.objective == Objective::Sft));
    }

    #[test]
    fn reruns_are_bit_identical() {
        let cfg = DpoConfig { steps_per_stage: 30, ..DpoConfig::default() };
        let st = stages(&[16, 8]);
        let a = run_curriculum(model(), &st, RunOrder::DpoOnly, &cfg).unwrap().to_jsonl();
        let b = run_curriculum(model(), &st, RunOrder::DpoOnly, &cfg).unwrap().to_jsonl();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_inputs() {
        let cfg = DpoConfig::default();
        assert!(matches!(
            run_curriculum(model(), &stages(&[4, 8]), RunOrder::DpoOnly, &cfg),
            Err(DpoError::StageOrder(_))
        ));
        let mut st = stages(&[8, 4]);
        st[1].pairs.clear();
        assert_eq!(run_curriculum(model(), &st, RunOrder::DpoOnly, &cfg), Err(DpoError::EmptyStage { stage: 1 }));
        let bad = DpoConfig { beta: 0.0, ..cfg };
        assert!(bad.validate().is_err());
        assert_eq!("sft_then_dpo".parse::<RunOrder>(), Ok(RunOrder::SftThenDpo));
        assert!("both".parse::<RunOrder>().is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = DpoConfig { learning_rate: 1e308, steps_per_stage: 5, ..DpoConfig::default() };
        let m = model();
        let data = &stages(&[2])[0].pairs;
        let err = train_stage(m.clone(), data, Objective::Sft, &cfg, &m, 3, None).unwrap_err();
        assert!(matches!(err, DpoError::NonFinite { stage: 3, .. }), "{err:?}");
    }
}
