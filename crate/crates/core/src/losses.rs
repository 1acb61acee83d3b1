//! Training objectives.
//!
//! Scalar versions evaluate a loss from per-trajectory log-quantities; the
//! `*_on` versions record the same computation on a [`Tape`] so gradients
//! flow into the policy and `log Z`.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn finite(name: &str, vals: &[f64]) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

/// Trajectory balance: `(log Z + log P_F − log R − log P_B)²`.
pub fn tb_loss(log_z: f64, log_pf: f64, log_pb: f64, log_r: f64) -> Result<f64> {
    finite("tb_loss input", &[log_z, log_pf, log_pb, log_r])?;
    Ok((log_z + log_pf - log_r - log_pb).powi(2))
}

/// Relative trajectory balance against a prior:
/// `(log Z + log P_F^post − log R − log P_F^prior)²`.
pub fn rtb_loss(log_z: f64, log_pf_post: f64, log_pf_prior: f64, log_r: f64) -> Result<f64> {
    finite("rtb_loss input", &[log_z, log_pf_post, log_pf_prior, log_r])?;
    Ok((log_z + log_pf_post - log_r - log_pf_prior).powi(2))
}

/// Per-trajectory inputs to a balance loss. `log_ref` is `log P_F^prior` for
/// relative balance or `log P_B` for plain trajectory balance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BalanceTerms {
    pub log_pf: f64,
    pub log_ref: f64,
    pub log_r: f64,
    pub feasible: bool,
}

/// Mean balance loss over feasible trajectories only. `Ok(None)` means the
/// batch has no positives and no update should happen.
pub fn onpolicy_positive_loss(log_z: f64, batch: &[BalanceTerms]) -> Result<Option<f64>> {
    if batch.iter().any(|t| !t.feasible) {
        return Err(Error::Infeasibility(
            "on-policy positive loss given an infeasible trajectory".into(),
        ));
    }
    if batch.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for t in batch {
        total += rtb_loss(log_z, t.log_pf, t.log_ref, t.log_r)?;
    }
    Ok(Some(total / batch.len() as f64))
}

/// Contrastive loss: each positive score against itself plus every negative,
///
/// `Σ_{p} −log( e^{s_p} / (e^{s_p} + Σ_n e^{s_n}) )`.
///
/// Other positives are not in a positive's denominator.
pub fn aux_loss(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() {
        return Err(Error::Empty("positive scores"));
    }
    if neg.is_empty() {
        return Err(Error::Empty("negative scores"));
    }
    finite("aux_loss scores", pos)?;
    finite("aux_loss scores", neg)?;
    let neg_max = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let neg_sum: f64 = neg.iter().map(|s| (s - neg_max).exp()).sum();
    let neg_lse = neg_max + neg_sum.ln();
    Ok(pos
        .iter()
        .map(|&s| {
            // log(e^s + e^{neg_lse}) - s
            let m = s.max(neg_lse);
            m + ((s - m).exp() + (neg_lse - m).exp()).ln() - s
        })
        .sum())
}

/// Mean balance loss over `pos` plus `α·aux(pos, neg)`, plus a separate
/// `α·aux(pos, mutants)` when mutants are given. Positive scores are the
/// `log_pf` of `pos`. An empty `neg` (or mutant) set drops its term.
pub fn replay_loss(log_z: f64, pos: &[BalanceTerms], neg: &[f64], mutants: Option<&[f64]>, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {alpha}")));
    }
    let base = onpolicy_positive_loss(log_z, pos)?.ok_or(Error::Empty("positive batch"))?;
    if alpha == 0.0 {
        return Ok(base);
    }
    let scores: Vec<f64> = pos.iter().map(|t| t.log_pf).collect();
    let mut total = base;
    if !neg.is_empty() {
        total += alpha * aux_loss(&scores, neg)?;
    }
    if let Some(m) = mutants.filter(|m| !m.is_empty()) {
        total += alpha * aux_loss(&scores, m)?;
    }
    Ok(total)
}

/// `r^β`.
pub fn temper_reward(r: f64, beta: f64) -> Result<f64> {
    Ok(tempered_log_reward(r, beta)?.exp())
}

/// `β·ln r`, the form used inside the losses.
pub fn tempered_log_reward(r: f64, beta: f64) -> Result<f64> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::InvalidArgument(format!("reward must be positive, got {r}")));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    Ok(beta * r.ln())
}

/// Reward with infeasible objects replaced by `floor`.
pub fn shaped_reward(r: f64, feasible: bool, floor: f64) -> f64 {
    if feasible {
        r
    } else {
        floor
    }
}

/// Records `mean_i (log Z + log_pf[i] − target[i])²` where `log_pf` is an
/// `n×1` column on the tape and `target[i] = log R + log_ref`.
pub fn balance_loss_on(tape: &mut Tape, log_z: Var, log_pf: Var, target: &[f64]) -> Result<Var> {
    let (n, c) = tape.value(log_pf).dims2()?;
    if c != 1 || n != target.len() || n == 0 {
        return Err(Error::Shape(format!(
            "balance loss over {n}x{c} log-probs and {} targets",
            target.len()
        )));
    }
    finite("balance target", target)?;
    let t = tape.constant(Tensor::column(target.to_vec())?)?;
    let shifted = tape.add(log_pf, log_z)?;
    let resid = tape.sub(shifted, t)?;
    let sq = tape.square(resid);
    Ok(tape.mean(sq))
}

/// Records [`aux_loss`] where scores are rows of the `n×1` column `scores`
/// selected by `pos` and `neg`.
pub fn aux_loss_on(tape: &mut Tape, scores: Var, pos: &[usize], neg: &[usize]) -> Result<Var> {
    if pos.is_empty() {
        return Err(Error::Empty("positive scores"));
    }
    if neg.is_empty() {
        return Err(Error::Empty("negative scores"));
    }
    let cols = 1 + neg.len();
    let mut idx = Vec::with_capacity(pos.len() * cols);
    for &p in pos {
        idx.push(p);
        idx.extend_from_slice(neg);
    }
    let table = tape.gather(scores, idx, pos.len(), cols)?;
    let ls = tape.log_softmax(table, None)?;
    let first: Vec<usize> = (0..pos.len()).map(|i| i * cols).collect();
    let picked = tape.gather(ls, first, pos.len(), 1)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{adam_step, AdamHyper, AdamState, ParamId, ParamSlot};
    use approx::assert_abs_diff_eq;

    fn pos(log_pf: f64, log_ref: f64, log_r: f64) -> BalanceTerms {
        BalanceTerms {
            log_pf,
            log_ref,
            log_r,
            feasible: true,
        }
    }

    #[test]
    fn balance_values() {
        assert_eq!(tb_loss(0.0, 0.0, 0.0, 0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(tb_loss(0.5, -2.0, -1.0, -1.0).unwrap(), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(rtb_loss(0.0, -3.0, -3.0, 2f64.ln()).unwrap(), 0.480453, epsilon = 1e-6);
        assert!(tb_loss(f64::NAN, 0.0, 0.0, 0.0).is_err());
        assert!(rtb_loss(0.0, f64::NEG_INFINITY, 0.0, 0.0).is_err());
    }

    #[test]
    fn tb_gradient_wrt_log_z() {
        let mut tape = Tape::new();
        let z = tape.param(ParamId(0), &Tensor::scalar(0.5)).unwrap();
        let lp = tape.constant(Tensor::scalar(-2.0)).unwrap();
        let loss = balance_loss_on(&mut tape, z, lp, &[-1.0 + -1.0]).unwrap();
        assert_abs_diff_eq!(tape.value(loss).values()[0], 0.25, epsilon = 1e-15);
        let g = tape.backprop_scalar(loss).unwrap();
        assert_abs_diff_eq!(g[&ParamId(0)].values()[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn positive_only_mean() {
        assert_eq!(onpolicy_positive_loss(0.0, &[]).unwrap(), None);
        let one = pos(-1.0, -1.5, 0.0);
        assert_abs_diff_eq!(onpolicy_positive_loss(0.0, &[one]).unwrap().unwrap(), 0.25, epsilon = 1e-15);
        // residuals sqrt(0.2), sqrt(0.4)
        let a = pos(0.2f64.sqrt(), 0.0, 0.0);
        let b = pos(0.4f64.sqrt(), 0.0, 0.0);
        assert_abs_diff_eq!(onpolicy_positive_loss(0.0, &[a, b]).unwrap().unwrap(), 0.3, epsilon = 1e-12);
        let bad = BalanceTerms { feasible: false, ..a };
        assert!(matches!(onpolicy_positive_loss(0.0, &[a, bad]), Err(Error::Infeasibility(_))));
    }

    #[test]
    fn aux_values() {
        let ln2 = 2f64.ln();
        assert_abs_diff_eq!(aux_loss(&[0.0], &[0.0]).unwrap(), ln2, epsilon = 1e-12);
        assert_abs_diff_eq!(aux_loss(&[10.0], &[0.0]).unwrap(), (1.0 + (-10f64).exp()).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(aux_loss(&[10.0], &[0.0]).unwrap(), 4.54e-5, epsilon = 1e-7);
        assert_abs_diff_eq!(aux_loss(&[0.0, 0.0], &[0.0]).unwrap(), 2.0 * ln2, epsilon = 1e-12);
        assert!(matches!(aux_loss(&[0.0], &[]), Err(Error::Empty(_))));
        assert!(matches!(aux_loss(&[], &[0.0]), Err(Error::Empty(_))));
        // extreme scores stay finite
        assert!(aux_loss(&[-800.0], &[0.0, 5.0]).unwrap().is_finite());
    }

    #[test]
    fn aux_matches_naive_formula() {
        let p = [-1.2, 0.3, -4.0];
        let n = [-2.0, 0.7, -0.1, -3.3];
        let naive: f64 = p
            .iter()
            .map(|&s: &f64| {
                let den = s.exp() + n.iter().map(|v: &f64| v.exp()).sum::<f64>();
                -(s.exp() / den).ln()
            })
            .sum();
        assert_abs_diff_eq!(aux_loss(&p, &n).unwrap(), naive, epsilon = 1e-12);
    }

    #[test]
    fn aux_monotone_by_finite_differences() {
        let p = vec![-1.2, 0.3, -4.0];
        let n = vec![-2.0, 0.7, -0.1];
        let h = 1e-5;
        let base = aux_loss(&p, &n).unwrap();
        for i in 0..p.len() {
            let mut q = p.clone();
            q[i] += h;
            assert!(aux_loss(&q, &n).unwrap() < base);
        }
        for i in 0..n.len() {
            let mut m = n.clone();
            m[i] += h;
            assert!(aux_loss(&p, &m).unwrap() > base);
        }
    }

    #[test]
    fn aux_shift_invariance_only_for_single_positive() {
        let a = aux_loss(&[0.4], &[1.0, -2.0]).unwrap();
        let b = aux_loss(&[3.4], &[4.0, 1.0]).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn aux_on_tape_matches_scalar() {
        let scores = [-1.2, 0.3, -4.0, -2.0, 0.7];
        let mut tape = Tape::new();
        let s = tape.param(ParamId(0), &Tensor::column(scores.to_vec()).unwrap()).unwrap();
        let loss = aux_loss_on(&mut tape, s, &[0, 1], &[2, 3, 4]).unwrap();
        let expect = aux_loss(&scores[..2], &scores[2..]).unwrap();
        assert_abs_diff_eq!(tape.value(loss).values()[0], expect, epsilon = 1e-12);
        let g = tape.backprop_scalar(loss).unwrap();
        let g = g[&ParamId(0)].values().to_vec();
        let h = 1e-6;
        for i in 0..scores.len() {
            let mut up = scores;
            up[i] += h;
            let mut dn = scores;
            dn[i] -= h;
            let fd = (aux_loss(&up[..2], &up[2..]).unwrap() - aux_loss(&dn[..2], &dn[2..]).unwrap()) / (2.0 * h);
            assert_abs_diff_eq!(g[i], fd, epsilon = 1e-7);
        }
        assert!(g[0] < 0.0 && g[1] < 0.0 && g[2] > 0.0);
    }

    #[test]
    fn replay_combination() {
        let a = pos(0.2f64.sqrt(), 0.0, 0.0);
        let b = pos(0.4f64.sqrt(), 0.0, 0.0);
        assert_abs_diff_eq!(replay_loss(0.0, &[a, b], &[0.0], None, 0.0).unwrap(), 0.3, epsilon = 1e-12);
        // one positive with score 0 against one negative at 0
        let c = pos(0.0, -(0.3f64.sqrt()), 0.0);
        assert_abs_diff_eq!(
            replay_loss(0.0, &[c], &[0.0], None, 0.01).unwrap(),
            0.3 + 0.00693147,
            epsilon = 1e-8
        );
        let both = replay_loss(0.0, &[c], &[0.0], Some(&[0.0]), 0.01).unwrap();
        assert_abs_diff_eq!(both, 0.3 + 2.0 * 0.01 * 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(replay_loss(0.0, &[c], &[], None, 0.01).unwrap(), 0.3, epsilon = 1e-12);
        assert!(replay_loss(0.0, &[], &[0.0], None, 0.01).is_err());
        assert!(replay_loss(0.0, &[c], &[0.0], None, -1.0).is_err());
    }

    #[test]
    fn tempering_and_shaping() {
        assert_abs_diff_eq!(temper_reward(0.5, 2.0).unwrap(), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(temper_reward(0.37, 1.0).unwrap(), 0.37, epsilon = 1e-15);
        assert_abs_diff_eq!(tempered_log_reward(2.1, 25.0).unwrap(), 25.0 * 2.1f64.ln(), epsilon = 1e-12);
        assert!(temper_reward(0.0, 1.0).is_err());
        assert!(temper_reward(1.0, 0.0).is_err());
        assert_eq!(shaped_reward(0.8, true, 1e-8), 0.8);
        assert_eq!(shaped_reward(0.8, false, 1e-8), 1e-8);
        assert_eq!(shaped_reward(0.8, true, 0.5), 0.8);
    }

    /// Tabular policy on a two-level binary tree: node 0 is the root, nodes
    /// 1 and 2 its children; leaf `2·c + j` is reached through child `c`.
    /// Returns per-leaf `log P(leaf)` recorded on the tape.
    fn tree_leaf_log_probs(tape: &mut Tape, logits: &Tensor) -> Var {
        let l = tape.param(ParamId(0), logits).unwrap();
        let ls = tape.log_softmax(l, None).unwrap();
        // flat index into the 3x2 table
        let idx = vec![0, 2, 0, 3, 1, 4, 1, 5];
        let steps = tape.gather(ls, idx, 8, 1).unwrap();
        tape.segment_sum(steps, vec![0, 0, 1, 1, 2, 2, 3, 3], 4).unwrap()
    }

    fn train_tree(target: &[f64]) -> Vec<f64> {
        let mut logits = Tensor::zeros(vec![3, 2]);
        let mut log_z = Tensor::scalar(0.0);
        let mut state = AdamState::new();
        let hyper = AdamHyper::default();
        let mut last = f64::INFINITY;
        for _ in 0..20_000 {
            let mut tape = Tape::new();
            let lp = tree_leaf_log_probs(&mut tape, &logits);
            let z = tape.param(ParamId(1), &log_z).unwrap();
            let loss = balance_loss_on(&mut tape, z, lp, target).unwrap();
            last = tape.value(loss).values()[0];
            if last < 1e-7 {
                break;
            }
            let g = tape.backprop_scalar(loss).unwrap();
            let mut slots = [
                ParamSlot {
                    id: ParamId(0),
                    tensor: &mut logits,
                    lr: 0.05,
                },
                ParamSlot {
                    id: ParamId(1),
                    tensor: &mut log_z,
                    lr: 0.05,
                },
            ];
            adam_step(&mut slots, &g, &mut state, &hyper).unwrap();
        }
        assert!(last < 1e-6, "loss {last}");
        let mut tape = Tape::new();
        let lp = tree_leaf_log_probs(&mut tape, &logits);
        tape.value(lp).values().iter().map(|v| v.exp()).collect()
    }

    #[test]
    fn tb_minimum_samples_proportional_to_reward() {
        let r = [0.1, 2.0, 0.5, 1.4];
        // the backward policy on a tree is deterministic: log P_B = 0
        let target: Vec<f64> = r.iter().map(|v: &f64| v.ln()).collect();
        let p = train_tree(&target);
        let z: f64 = r.iter().sum();
        let tv: f64 = 0.5 * p.iter().zip(&r).map(|(a, b)| (a - b / z).abs()).sum::<f64>();
        assert!(tv < 1e-3, "tv {tv}");
    }

    #[test]
    fn rtb_minimum_is_reward_times_prior() {
        let r = [0.1, 2.0, 0.5, 1.4];
        let prior = [0.4, 0.1, 0.3, 0.2];
        let target: Vec<f64> = r.iter().zip(&prior).map(|(a, b): (&f64, &f64)| a.ln() + b.ln()).collect();
        let p = train_tree(&target);
        let z: f64 = r.iter().zip(&prior).map(|(a, b)| a * b).sum();
        let tv: f64 = 0.5 * (0..4).map(|i| (p[i] - r[i] * prior[i] / z).abs()).sum::<f64>();
        assert!(tv < 1e-3, "tv {tv}");
    }
}
