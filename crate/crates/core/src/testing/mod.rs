//! Multiple testing on the fitted model and baseline procedures.
//!
//! The structured l-value of a pair is its posterior null probability given
//! the estimated memberships and parameters. Rejecting every pair with
//! `l <= tau` has plug-in mFDR equal to the mean of the rejected l-values;
//! `tau` is the largest threshold whose plug-in mFDR stays at or below the
//! target level.

mod kde;

pub use kde::{kde, silverman_bandwidth};

use ndarray::Array2;
use serde::Serialize;
use libm::erfc;
use std::f64::consts::SQRT_2;

use crate::error::{Error, Result};
use crate::inference::FitResult;
use crate::model::{
    edge_log_odds, gaussian_log_pdf, logistic, AdjacencyMatrix, MembershipVector, ModelParams, ZScoreMatrix,
};

/// Tuning parameter of Storey's null-proportion estimate used by default.
pub const STOREY_LAMBDA: f64 = 0.5;

/// Matrix of structured l-values, entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LValueMatrix {
    values: Array2<f64>,
}

impl LValueMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(((i, j), v)) = values.indexed_iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation {
                row: i,
                col: j,
                message: format!("l-value {v} outside [0, 1]"),
            });
        }
        Ok(LValueMatrix {
            values: values.as_standard_layout().into_owned(),
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice().expect("standard layout")
    }
}

/// Structured l-values `(1-π)g0 / (πg + (1-π)g0)` at each pair's assigned
/// block.
pub fn l_values(
    x: &ZScoreMatrix,
    z1: &MembershipVector,
    z2: &MembershipVector,
    params: &ModelParams,
) -> Result<LValueMatrix> {
    if z1.len() != x.n1() || z2.len() != x.n2() {
        return Err(Error::Dimension(format!(
            "memberships ({}, {}) do not match data {}x{}",
            z1.len(),
            z2.len(),
            x.n1(),
            x.n2()
        )));
    }
    if z1.n_blocks() != params.b1() || z2.n_blocks() != params.b2() {
        return Err(Error::Dimension("memberships do not match parameter block counts".into()));
    }
    let sigma0_sq = params.null_params.sigma0_sq;
    let values = Array2::from_shape_fn((x.n1(), x.n2()), |(i, j)| {
        let (q, l) = (z1.labels()[i], z2.labels()[j]);
        let raw = params.pi[[q, l]];
        if raw <= 0.0 {
            return 1.0;
        }
        if raw >= 1.0 {
            return 0.0;
        }
        let xv = x.get(i, j);
        let la = gaussian_log_pdf(xv, params.alt_params.mu[[q, l]], params.alt_params.sigma_sq[[q, l]]);
        let l0 = gaussian_log_pdf(xv, 0.0, sigma0_sq);
        logistic(-edge_log_odds(la, l0, params.pi_clamped(q, l)))
    });
    LValueMatrix::new(values)
}

/// Rejection threshold and the plug-in mFDR of the rejected set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Threshold {
    /// `-1` when nothing is rejected.
    pub tau: f64,
    pub est_mfdr: f64,
    pub n_rejected: usize,
}

/// Largest threshold `tau` among the observed values such that the mean of
/// all values `<= tau` is at most `alpha`. All values tied at `tau` are
/// rejected.
pub fn mfdr_threshold_values(values: &[f64], alpha: f64) -> Threshold {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = Threshold {
        tau: -1.0,
        est_mfdr: 0.0,
        n_rejected: 0,
    };
    let mut sum = 0.0;
    for k in 0..sorted.len() {
        sum += sorted[k];
        let group_end = k + 1 == sorted.len() || sorted[k + 1] > sorted[k];
        if !group_end {
            continue;
        }
        let mean = sum / (k + 1) as f64;
        if mean <= alpha {
            best = Threshold {
                tau: sorted[k],
                est_mfdr: mean,
                n_rejected: k + 1,
            };
        }
    }
    best
}

pub fn mfdr_threshold(l: &LValueMatrix, alpha: f64) -> Threshold {
    mfdr_threshold_values(l.as_slice(), alpha)
}

/// `φ_ij = 1(l_ij <= tau)`.
pub fn decide(l: &LValueMatrix, tau: f64) -> Array2<u8> {
    l.values.mapv(|v| u8::from(v <= tau))
}

/// Full testing output for one level.
#[derive(Debug, Clone)]
pub struct DecisionReport {
    pub l_values: LValueMatrix,
    pub tau: f64,
    pub decisions: Array2<u8>,
    pub est_mfdr: f64,
    pub alpha: f64,
}

impl DecisionReport {
    pub fn new(l_values: LValueMatrix, alpha: f64) -> Self {
        let t = mfdr_threshold(&l_values, alpha);
        let decisions = decide(&l_values, t.tau);
        DecisionReport {
            l_values,
            tau: t.tau,
            decisions,
            est_mfdr: t.est_mfdr,
            alpha,
        }
    }

    /// l-values at the fitted MAP memberships and parameters.
    pub fn from_fit(x: &ZScoreMatrix, fit: &FitResult, alpha: f64) -> Result<Self> {
        Ok(Self::new(l_values(x, &fit.z1_hat, &fit.z2_hat, &fit.params)?, alpha))
    }

    pub fn n_rejected(&self) -> usize {
        self.decisions.iter().filter(|&&d| d == 1).count()
    }
}

/// Two-sided normal p-value `2(1 - Φ(|z|)) = erfc(|z|/√2)`.
pub fn p_from_z(z: f64) -> f64 {
    erfc(z.abs() / SQRT_2)
}

/// Benjamini–Hochberg step-up procedure.
pub fn bh(p: &[f64], alpha: f64) -> Vec<bool> {
    let m = p.len();
    let mut sorted = p.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut cutoff = None;
    for (k, &pk) in sorted.iter().enumerate() {
        if pk <= (k + 1) as f64 * alpha / m as f64 {
            cutoff = Some(pk);
        }
    }
    match cutoff {
        Some(c) => p.iter().map(|&v| v <= c).collect(),
        None => vec![false; m],
    }
}

/// Storey's null-proportion estimate `min(1, #{p > λ} / ((1-λ) m))`; exactly
/// 1 at `λ = 0`.
pub fn storey_pi0(p: &[f64], lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 1.0;
    }
    let above = p.iter().filter(|&&v| v > lambda).count() as f64;
    (above / ((1.0 - lambda) * p.len() as f64)).min(1.0)
}

/// Adaptive BH at level `alpha / π̂0`.
pub fn storey(p: &[f64], alpha: f64, lambda: f64) -> Vec<bool> {
    let pi0 = storey_pi0(p, lambda);
    if pi0 == 1.0 {
        return bh(p, alpha);
    }
    bh(p, alpha / pi0)
}

/// Applies the l-value thresholding rule to any vector of posterior null
/// probabilities.
pub fn threshold_lfdr(lfdr: &[f64], alpha: f64) -> Vec<bool> {
    let t = mfdr_threshold_values(lfdr, alpha);
    lfdr.iter().map(|&v| v <= t.tau).collect()
}

/// Local-fdr estimates `min(1, π̂0 φ(z) / f̂(z))` with a known `N(0,1)` null,
/// a Silverman-bandwidth Gaussian KDE for `f̂` and Storey's `π̂0` at
/// `λ = 0.5` on the two-sided p-values.
pub fn lfdr_estimates(z: &[f64]) -> Vec<f64> {
    if z.is_empty() {
        return Vec::new();
    }
    let h = silverman_bandwidth(z);
    let f = kde(z, h, z);
    let p: Vec<f64> = z.iter().map(|&v| p_from_z(v)).collect();
    let pi0 = storey_pi0(&p, STOREY_LAMBDA);
    z.iter()
        .zip(f)
        .map(|(&v, fv)| {
            let null = pi0 * gaussian_log_pdf(v, 0.0, 1.0).exp();
            if fv > 0.0 {
                (null / fv).min(1.0)
            } else {
                1.0
            }
        })
        .collect()
}

/// Adaptive z-value lfdr procedure with known null.
pub fn lfdr_threshold(z: &[f64], alpha: f64) -> Vec<bool> {
    threshold_lfdr(&lfdr_estimates(z), alpha)
}

/// Per-dataset false and true discovery proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub fdp: f64,
    pub tdp: f64,
    pub n_rejected: usize,
}

pub fn evaluate(decisions: &Array2<u8>, truth: &AdjacencyMatrix) -> Result<EvalMetrics> {
    if decisions.dim() != truth.entries().dim() {
        return Err(Error::Dimension(format!(
            "decisions {:?} vs truth {:?}",
            decisions.dim(),
            truth.entries().dim()
        )));
    }
    let flat: Vec<bool> = decisions.iter().map(|&d| d == 1).collect();
    let edges: Vec<bool> = truth.entries().iter().map(|&a| a == 1).collect();
    Ok(evaluate_flat(&flat, &edges))
}

pub fn evaluate_flat(decisions: &[bool], edges: &[bool]) -> EvalMetrics {
    let mut rejected = 0usize;
    let mut false_rej = 0usize;
    let mut true_rej = 0usize;
    let mut n_edges = 0usize;
    for (&d, &a) in decisions.iter().zip(edges) {
        rejected += usize::from(d);
        n_edges += usize::from(a);
        if d && a {
            true_rej += 1;
        } else if d {
            false_rej += 1;
        }
    }
    EvalMetrics {
        fdp: false_rej as f64 / rejected.max(1) as f64,
        tdp: true_rej as f64 / n_edges.max(1) as f64,
        n_rejected: rejected,
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let sum_cells: f64 = table.iter().map(|&v| c2(v)).sum();
    let row_sums: f64 = (0..ka).map(|x| c2(table[x * kb..(x + 1) * kb].iter().sum())).sum();
    let col_sums: f64 = (0..kb).map(|y| c2((0..ka).map(|x| table[x * kb + y]).sum())).sum();
    let total = c2(n as u64);
    let expected = row_sums * col_sums / total;
    let max_index = 0.5 * (row_sums + col_sums);
    if (max_index - expected).abs() < f64::EPSILON {
        return if sum_cells == max_index { 1.0 } else { 0.0 };
    }
    (sum_cells - expected) / (max_index - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::one_block;
    use crate::model::Side;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn lmat(v: &[f64]) -> LValueMatrix {
        LValueMatrix::new(Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()).unwrap()
    }

    fn single(n: usize, side: Side) -> MembershipVector {
        MembershipVector::new(side, 1, vec![0; n]).unwrap()
    }

    #[test]
    fn l_value_extremes_and_value() {
        let x = ZScoreMatrix::from_rows(1, 3, vec![-1.0, 0.0, 4.0]).unwrap();
        let (z1, z2) = (single(1, Side::Row), single(3, Side::Column));
        let l = l_values(&x, &z1, &z2, &one_block(0.0, 1.0, 0.25)).unwrap();
        assert!(l.as_slice().iter().all(|&v| v == 1.0));
        let l = l_values(&x, &z1, &z2, &one_block(1.0, 1.0, 0.25)).unwrap();
        assert!(l.as_slice().iter().all(|&v| v == 0.0));
        let l = l_values(&x, &z1, &z2, &one_block(0.8, 1.0, 0.25)).unwrap();
        assert_abs_diff_eq!(l.as_slice()[1], 0.480_150_052_831_641_7, epsilon = 1e-14);
    }

    #[test]
    fn threshold_worked_example() {
        let l = lmat(&[0.6, 0.01, 0.2, 0.05]);
        let t = mfdr_threshold(&l, 0.1);
        assert_eq!(t.n_rejected, 3);
        assert_eq!(t.tau, 0.2);
        assert_abs_diff_eq!(t.est_mfdr, 0.26 / 3.0, epsilon = 1e-15);
        assert_eq!(decide(&l, t.tau), array![[0, 1, 1, 1]]);
    }

    #[test]
    fn threshold_edge_levels() {
        let l = lmat(&[0.3, 0.5, 0.9]);
        let none = mfdr_threshold(&l, 0.1);
        assert_eq!((none.tau, none.n_rejected), (-1.0, 0));
        assert!(decide(&l, none.tau).iter().all(|&d| d == 0));
        let all = mfdr_threshold(&l, 1.0);
        assert_eq!(all.n_rejected, 3);
        assert!(decide(&l, 1.0).iter().all(|&d| d == 1));
    }

    #[test]
    fn ties_at_tau_are_all_rejected_within_level() {
        // 0.0 alone has mean 0; adding both 0.3 ties gives mean 0.2
        let l = lmat(&[0.0, 0.3, 0.3]);
        let t = mfdr_threshold(&l, 0.2);
        assert_eq!(t.n_rejected, 3);
        // at 0.15 the tie group would overshoot, so only the zero goes
        let t = mfdr_threshold(&l, 0.15);
        assert_eq!((t.tau, t.n_rejected), (0.0, 1));
        assert!(t.est_mfdr <= 0.15);
    }

    #[test]
    fn bh_examples() {
        assert_eq!(bh(&[0.01, 0.02, 0.04, 0.5], 0.05), vec![true, true, false, false]);
        assert_eq!(bh(&[0.0, 0.0, 0.0], 0.01), vec![true; 3]);
        assert_eq!(bh(&[0.04], 0.05), vec![true]);
        assert_eq!(bh(&[0.06], 0.05), vec![false]);
        // step-up: a later passing rank rescues earlier failures
        assert_eq!(bh(&[0.03, 0.031, 0.032], 0.05), vec![true; 3]);
    }

    #[test]
    fn storey_reductions() {
        let p = [0.0, 0.001, 0.2, 0.7, 0.03, 0.9];
        assert_eq!(storey(&p, 0.1, 0.0), bh(&p, 0.1));
        let high = [0.6, 0.7, 0.8, 0.95];
        assert_eq!(storey_pi0(&high, 0.5), 1.0);
        assert_eq!(storey(&high, 0.1, 0.5), bh(&high, 0.1));
    }

    #[test]
    fn storey_dominates_bh_with_strong_signal() {
        for seed in 0..20 {
            let mut r = rng::from_seed(seed);
            let mut p: Vec<f64> = (0..500).map(|_| r.random::<f64>()).collect();
            p.extend(std::iter::repeat_n(1e-6, 500));
            let s = storey(&p, 0.05, 0.5).iter().filter(|&&v| v).count();
            let b = bh(&p, 0.05).iter().filter(|&&v| v).count();
            assert!(s >= b);
        }
    }

    #[test]
    fn p_values() {
        assert_eq!(p_from_z(0.0), 1.0);
        // mpmath references
        let refs = [
            (1.959964, 0.049_999_998_192_884_81),
            (0.5, 0.617_075_077_451_973_8),
            (1.0, 0.317_310_507_862_914_1),
            (3.0, 0.002_699_796_063_260_189),
            (5.0, 5.733_031_437_583_878e-7),
            (8.0, 1.244_192_114_854_356_8e-15),
        ];
        for (z, want) in refs {
            let got = p_from_z(z);
            assert!(((got - want) / want).abs() < 1e-14, "z={z}: {got} vs {want}");
            assert_eq!(p_from_z(-z), got);
        }
    }

    #[test]
    fn lfdr_null_calibration() {
        // every rejection is false here, so the FDP of a draw is 1 whenever
        // anything is rejected
        let draws = 200;
        let mut noisy = 0;
        for seed in 0..draws {
            let mut r = rng::from_seed(100 + seed);
            let z: Vec<f64> = (0..5000).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut r)).collect();
            if lfdr_threshold(&z, 0.05).iter().any(|&v| v) {
                noisy += 1;
            }
        }
        let fdr = noisy as f64 / draws as f64;
        let se = (0.05f64 * 0.95 / draws as f64).sqrt();
        assert!(fdr <= 0.05 + 2.0 * se, "{noisy}/{draws} null draws with rejections");
    }

    #[test]
    fn lfdr_capped_at_one() {
        // all mass at the null mode: the estimated density sits below π0 φ
        let z = vec![0.0; 10];
        assert!(lfdr_estimates(&z).iter().all(|&v| v <= 1.0));
        let z: Vec<f64> = (0..200).map(|k| (k as f64 / 200.0) - 0.5).collect();
        let l = lfdr_estimates(&z);
        assert!(l.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(!threshold_lfdr(&vec![1.0; 50], 0.2).iter().any(|&v| v));
    }

    #[test]
    fn lfdr_rule_matches_structured_rule() {
        let mut r = rng::from_seed(3);
        let vals: Vec<f64> = (0..300).map(|_| r.random::<f64>().powi(3)).collect();
        let l = lmat(&vals);
        let t = mfdr_threshold(&l, 0.1);
        let via_matrix: Vec<bool> = decide(&l, t.tau).iter().map(|&d| d == 1).collect();
        assert_eq!(threshold_lfdr(&vals, 0.1), via_matrix);
    }

    #[test]
    fn evaluate_examples() {
        let truth = AdjacencyMatrix::new(array![[1, 0], [1, 1]]).unwrap();
        let m = evaluate(truth.entries(), &truth).unwrap();
        assert_eq!((m.fdp, m.tdp), (0.0, 1.0));
        let m = evaluate(&Array2::zeros((2, 2)), &truth).unwrap();
        assert_eq!((m.fdp, m.tdp, m.n_rejected), (0.0, 0.0, 0));
        let truth = AdjacencyMatrix::new(array![[1, 1, 0], [1, 1, 0]]).unwrap();
        let m = evaluate(&array![[1, 0, 1], [0, 1, 0]], &truth).unwrap();
        assert_abs_diff_eq!(m.fdp, 1.0 / 3.0);
        assert_abs_diff_eq!(m.tdp, 0.5);
        assert!(matches!(evaluate(&Array2::zeros((3, 2)), &truth), Err(Error::Dimension(_))));
    }

    #[test]
    fn ari_basics() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert!(adjusted_rand_index(&[0, 1, 0, 1], &[0, 0, 1, 1]) < 0.0 + 1e-12);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[0, 0, 0]), 1.0);
    }

    proptest! {
        #[test]
        fn threshold_controls_level_and_is_monotone(vals in proptest::collection::vec(0.0f64..1.0, 1..60), a1 in 0.01f64..1.0, a2 in 0.01f64..1.0) {
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let t_lo = mfdr_threshold_values(&vals, lo);
            let t_hi = mfdr_threshold_values(&vals, hi);
            prop_assert!(t_lo.n_rejected <= t_hi.n_rejected);
            if t_lo.n_rejected > 0 {
                prop_assert!(t_lo.est_mfdr <= lo);
            }
        }

        #[test]
        fn bh_monotone_in_alpha(p in proptest::collection::vec(0.0f64..1.0, 1..80), a1 in 0.001f64..0.5, a2 in 0.001f64..0.5) {
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let r_lo = bh(&p, lo);
            let r_hi = bh(&p, hi);
            prop_assert!(r_lo.iter().zip(&r_hi).all(|(a, b)| !a || *b));
            let s_lo = storey(&p, lo, 0.5);
            let s_hi = storey(&p, hi, 0.5);
            prop_assert!(s_lo.iter().zip(&s_hi).all(|(a, b)| !a || *b));
            prop_assert_eq!(storey(&p, lo, 0.0), bh(&p, lo));
        }

        #[test]
        fn counting_identity(bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..100)) {
            let d: Vec<bool> = bits.iter().map(|b| b.0).collect();
            let a: Vec<bool> = bits.iter().map(|b| b.1).collect();
            let m = evaluate_flat(&d, &a);
            let edges = a.iter().filter(|&&v| v).count();
            let true_rej = d.iter().zip(&a).filter(|(x, y)| **x && **y).count();
            let false_rej = m.n_rejected - true_rej;
            prop_assert!((m.fdp * m.n_rejected.max(1) as f64 - false_rej as f64).abs() < 1e-9);
            prop_assert!((m.tdp * edges.max(1) as f64 - true_rej as f64).abs() < 1e-9);
            if m.n_rejected > 0 && edges > 0 {
                prop_assert!((m.fdp * m.n_rejected as f64 + m.tdp * edges as f64 - m.n_rejected as f64).abs() < 1e-9);
            }
        }
    }
}
