//! DPO and SFT losses with their analytic gradients.

use super::{logprob, DpoError, TokenPair, ToyModel};

/// `-log sigmoid(x)`, evaluated without overflow.
pub(crate) fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_batch(theta: &ToyModel, reference: &ToyModel, batch: &[TokenPair]) -> Result<(), DpoError> {
    if theta.shape() != reference.shape() {
        return Err(DpoError::ShapeMismatch(theta.shape(), reference.shape()));
    }
    if batch.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    Ok(())
}

/// `(logp(chosen) - logp(rejected))` under `model`.
fn log_ratio(model: &ToyModel, p: &TokenPair) -> Result<f64, DpoError> {
    Ok(logprob(model, &p.context, &p.chosen)? - logprob(model, &p.context, &p.rejected)?)
}

/// Unscaled margin of each pair: policy log-ratio minus reference log-ratio.
fn margins(theta: &ToyModel, reference: &ToyModel, batch: &[TokenPair]) -> Result<Vec<f64>, DpoError> {
    check_batch(theta, reference, batch)?;
    batch
        .iter()
        .map(|p| Ok(log_ratio(theta, p)? - log_ratio(reference, p)?))
        .collect()
}

pub fn dpo_loss(theta: &ToyModel, reference: &ToyModel, batch: &[TokenPair], beta: f64) -> Result<f64, DpoError> {
    let m = margins(theta, reference, batch)?;
    Ok(m.iter().map(|&m| neg_log_sigmoid(beta * m)).sum::<f64>() / m.len() as f64)
}

/// Mean reward margin `beta * (policy log-ratio - reference log-ratio)`.
pub fn mean_margin(theta: &ToyModel, reference: &ToyModel, batch: &[TokenPair], beta: f64) -> Result<f64, DpoError> {
    let m = margins(theta, reference, batch)?;
    Ok(beta * m.iter().sum::<f64>() / m.len() as f64)
}

/// Per pair the coefficient `-beta * sigmoid(-beta * margin)` scales the
/// gradient of the policy log-ratio; the result is averaged over the batch.
pub fn dpo_grad(theta: &ToyModel, reference: &ToyModel, batch: &[TokenPair], beta: f64) -> Result<Vec<f64>, DpoError> {
    let m = margins(theta, reference, batch)?;
    let n = batch.len() as f64;
    let mut g = vec![0.0; theta.theta().len()];
    for (p, &mi) in batch.iter().zip(&m) {
        let coeff = -beta * sigmoid(-beta * mi) / n;
        theta.accumulate_logprob_grad(&p.context, &p.chosen, coeff, &mut g)?;
        theta.accumulate_logprob_grad(&p.context, &p.rejected, -coeff, &mut g)?;
    }
    Ok(g)
}

/// Mean negative log-likelihood of the chosen sequences.
pub fn sft_loss(theta: &ToyModel, batch: &[TokenPair]) -> Result<f64, DpoError> {
    if batch.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    let mut s = 0.0;
    for p in batch {
        s -= logprob(theta, &p.context, &p.chosen)?;
    }
    Ok(s / batch.len() as f64)
}

pub fn sft_grad(theta: &ToyModel, batch: &[TokenPair]) -> Result<Vec<f64>, DpoError> {
    if batch.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    let w = -1.0 / batch.len() as f64;
    let mut g = vec![0.0; theta.theta().len()];
    for p in batch {
        theta.accumulate_logprob_grad(&p.context, &p.chosen, w, &mut g)?;
    }
    Ok(g)
}

/// Reference log-ratio of every pair; constant while the reference is frozen.
pub(crate) fn reference_ratios(reference: &ToyModel, batch: &[TokenPair]) -> Result<Vec<f64>, DpoError> {
    batch.iter().map(|p| log_ratio(reference, p)).collect()
}

/// Loss, gradient and mean reward margin in one pass, sharing each pair's
/// softmax between the two sides.
pub(crate) fn evaluate(
    theta: &ToyModel,
    ref_ratios: &[f64],
    batch: &[TokenPair],
    beta: f64,
    sft: bool,
) -> Result<(f64, Vec<f64>, f64), DpoError> {
    if batch.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let (v, c) = (theta.vocab(), theta.context_dim());
    let mut grad = vec![0.0; v * c];
    let mut loss = 0.0;
    let mut margin_sum = 0.0;
    let mut coeff = vec![0.0; v];
    for (p, &ref_ratio) in batch.iter().zip(ref_ratios) {
        theta.check_tokens(&p.chosen)?;
        theta.check_tokens(&p.rejected)?;
        let ls = theta.log_softmax(&p.context)?;
        let lp_c: f64 = p.chosen.iter().map(|&t| ls[t as usize]).sum();
        let lp_r: f64 = p.rejected.iter().map(|&t| ls[t as usize]).sum();
        let m = lp_c - lp_r - ref_ratio;
        margin_sum += m;
        // d/dz of (w_c * logp(chosen) + w_r * logp(rejected)).
        let (w_c, w_r) = if sft {
            loss -= lp_c;
            (-1.0 / n, 0.0)
        } else {
            loss += neg_log_sigmoid(beta * m);
            let k = -beta * sigmoid(-beta * m) / n;
            (k, -k)
        };
        let total = w_c * p.chosen.len() as f64 + w_r * p.rejected.len() as f64;
        for (k, l) in coeff.iter_mut().zip(&ls) {
            *k = -total * l.exp();
        }
        for &t in &p.chosen {
            coeff[t as usize] += w_c;
        }
        for &t in &p.rejected {
            coeff[t as usize] += w_r;
        }
        for (ci, &x) in p.context.iter().enumerate() {
            if x != 0.0 {
                for (g, &k) in grad[ci * v..(ci + 1) * v].iter_mut().zip(&coeff) {
                    *g += x * k;
                }
            }
        }
    }
    Ok((loss / n, grad, beta * margin_sum / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use std::f64::consts::LN_2;

    fn random_batch(rng: &mut SplitMix64, v: usize, c: usize, n: usize) -> Vec<TokenPair> {
        (0..n)
            .map(|_| {
                let seq = |rng: &mut SplitMix64| {
                    let len = 1 + rng.below(6) as usize;
                    (0..len).map(|_| rng.below(v as u64) as u32).collect::<Vec<_>>()
                };
                TokenPair {
                    context: (0..c).map(|_| rng.next_f64() * 2.0 - 1.0).collect(),
                    chosen: seq(rng),
                    rejected: seq(rng),
                    r: 2,
                }
            })
            .collect()
    }

    /// Central differences of `f` with respect to every parameter.
    fn finite_diff(model: &ToyModel, f: impl Fn(&ToyModel) -> f64) -> Vec<f64> {
        let eps = 1e-6;
        (0..model.theta().len())
            .map(|i| {
                let mut plus = model.clone();
                plus.theta_mut()[i] += eps;
                let mut minus = model.clone();
                minus.theta_mut()[i] -= eps;
                (f(&plus) - f(&minus)) / (2.0 * eps)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    #[test]
    fn scalar_oracle_v2_c1() {
        let theta = ToyModel::from_theta(2, 1, vec![1.5, -0.5]).unwrap();
        let reference = ToyModel::from_theta(2, 1, vec![0.2, 0.1]).unwrap();
        let pair = TokenPair { context: vec![2.0], chosen: vec![0, 0], rejected: vec![1], r: 4 };
        // Hand evaluation: logits are 2*theta.
        let lp = |a: f64, b: f64, tok: usize| {
            let z = [a, b];
            z[tok] - (a.exp() + b.exp()).ln()
        };
        let pol = 2.0 * lp(3.0, -1.0, 0) - lp(3.0, -1.0, 1);
        let refr = 2.0 * lp(0.4, 0.2, 0) - lp(0.4, 0.2, 1);
        let beta = 0.7;
        let want = -(1.0 / (1.0 + (-beta * (pol - refr)).exp())).ln();
        let got = dpo_loss(&theta, &reference, &[pair], beta).unwrap();
        assert!((got - want).abs() < 1e-13, "{got} vs {want}");
    }

    #[test]
    fn zero_margin_is_ln2() {
        let mut rng = SplitMix64::new(1);
        let m = ToyModel::random(5, 3, 2.0, 2).unwrap();
        let b = random_batch(&mut rng, 5, 3, 7);
        for beta in [0.1, 1.0, 50.0] {
            assert!((dpo_loss(&m, &m, &b, beta).unwrap() - LN_2).abs() < 1e-12);
        }
        let other = ToyModel::random(5, 3, 2.0, 3).unwrap();
        assert!((dpo_loss(&other, &m, &b, 0.0).unwrap() - LN_2).abs() < 1e-12);
    }

    #[test]
    fn zero_margin_gradient_coefficient_is_half_beta() {
        let theta = ToyModel::random(4, 2, 1.0, 5).unwrap();
        let pair = TokenPair { context: vec![1.0, -0.5], chosen: vec![0, 1], rejected: vec![2, 3], r: 2 };
        let beta = 0.3;
        let g = dpo_grad(&theta, &theta, std::slice::from_ref(&pair), beta).unwrap();
        let mut want = vec![0.0; 8];
        theta.accumulate_logprob_grad(&pair.context, &pair.chosen, -beta / 2.0, &mut want).unwrap();
        theta.accumulate_logprob_grad(&pair.context, &pair.rejected, beta / 2.0, &mut want).unwrap();
        assert!(max_rel_err(&g, &want) < 1e-12);
    }

    #[test]
    fn identical_sides_give_zero_gradient() {
        let theta = ToyModel::random(4, 2, 1.0, 5).unwrap();
        let reference = ToyModel::random(4, 2, 1.0, 6).unwrap();
        let pair = TokenPair { context: vec![1.0, 2.0], chosen: vec![1, 3, 3], rejected: vec![1, 3, 3], r: 2 };
        let g = dpo_grad(&theta, &reference, &[pair], 1.0).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SplitMix64::new(77);
        for trial in 0..30 {
            let v = 2 + rng.below(7) as usize;
            let c = 1 + rng.below(4) as usize;
            let theta = ToyModel::random(v, c, 1.5, trial).unwrap();
            let reference = ToyModel::random(v, c, 1.5, trial + 1000).unwrap();
            let n = 1 + rng.below(4) as usize;
            let batch = random_batch(&mut rng, v, c, n);
            let beta = 0.05 + rng.next_f64() * 2.0;
            let g = dpo_grad(&theta, &reference, &batch, beta).unwrap();
            let fd = finite_diff(&theta, |m| dpo_loss(m, &reference, &batch, beta).unwrap());
            assert!(max_rel_err(&g, &fd) < 1e-5, "dpo trial {trial}");
            let g = sft_grad(&theta, &batch).unwrap();
            let fd = finite_diff(&theta, |m| sft_loss(m, &batch).unwrap());
            assert!(max_rel_err(&g, &fd) < 1e-5, "sft trial {trial}");
        }
    }

    #[test]
    fn fused_evaluation_matches_separate_functions() {
        let mut rng = SplitMix64::new(3);
        for trial in 0..10 {
            let theta = ToyModel::random(6, 3, 1.0, trial).unwrap();
            let reference = ToyModel::random(6, 3, 1.0, trial + 50).unwrap();
            let batch = random_batch(&mut rng, 6, 3, 5);
            let ratios = reference_ratios(&reference, &batch).unwrap();
            let (l, g, m) = evaluate(&theta, &ratios, &batch, 0.4, false).unwrap();
            assert!((l - dpo_loss(&theta, &reference, &batch, 0.4).unwrap()).abs() < 1e-12);
            assert!(max_rel_err(&g, &dpo_grad(&theta, &reference, &batch, 0.4).unwrap()) < 1e-10);
            assert!((m - mean_margin(&theta, &reference, &batch, 0.4).unwrap()).abs() < 1e-12);
            let (l, g, _) = evaluate(&theta, &ratios, &batch, 0.4, true).unwrap();
            assert!((l - sft_loss(&theta, &batch).unwrap()).abs() < 1e-12);
            assert!(max_rel_err(&g, &sft_grad(&theta, &batch).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn sft_values() {
        let m = ToyModel::zeros(2, 1).unwrap();
        let b = [TokenPair { context: vec![1.0], chosen: vec![0, 1, 0], rejected: vec![1], r: 2 }];
        assert!((sft_loss(&m, &b).unwrap() - 2.0794415416798357).abs() < 1e-12);
        let sharp = ToyModel::from_theta(2, 1, vec![40.0, -40.0]).unwrap();
        let b = [TokenPair { context: vec![1.0], chosen: vec![0, 0, 0], rejected: vec![1], r: 2 }];
        assert!(sft_loss(&sharp, &b).unwrap() < 1e-30);
    }

    #[test]
    fn shape_and_batch_errors() {
        let a = ToyModel::zeros(3, 1).unwrap();
        let b = ToyModel::zeros(4, 1).unwrap();
        let p = TokenPair { context: vec![1.0], chosen: vec![0], rejected: vec![1], r: 2 };
        assert!(matches!(dpo_loss(&a, &b, &[p], 0.1), Err(DpoError::ShapeMismatch(..))));
        assert_eq!(dpo_loss(&a, &a, &[], 0.1), Err(DpoError::EmptyBatch));
        assert_eq!(sft_grad(&a, &[]), Err(DpoError::EmptyBatch));
    }

    #[test]
    fn stable_sigmoid_pieces() {
        assert_eq!(neg_log_sigmoid(0.0), LN_2);
        assert!(neg_log_sigmoid(-800.0).is_finite());
        assert!((neg_log_sigmoid(-800.0) - 800.0).abs() < 1e-9);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
