//! Rejection thresholds from a fitted mixture.
//!
//! With the beta alternative, the per-hypothesis cutoff solving the budget
//! `sum_i y_i t_i / (1 - gamma) = alpha` has a closed form, so no root
//! finding is needed. Everything is evaluated in log space: with `k` close to
//! one the exponent `1 / (1 - k)` reaches 1000.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{check_open_unit, HypothesisTable, MixtureFit};
use crate::reduce;

/// Clamp range `[eps1, eps2]` for the estimated null probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinsorBounds {
    pub eps1: f64,
    pub eps2: f64,
}

impl Default for WinsorBounds {
    fn default() -> Self {
        Self {
            eps1: 0.01,
            eps2: 0.99,
        }
    }
}

impl WinsorBounds {
    /// No clamping at all.
    pub const NONE: WinsorBounds = WinsorBounds { eps1: 0.0, eps2: 1.0 };

    pub fn validate(&self) -> Result<()> {
        // The closed end points are only meant for the unwinsorized view.
        if !(0.0 <= self.eps1 && self.eps1 < self.eps2 && self.eps2 <= 1.0) {
            return invalid(format!(
                "winsorization bounds need 0 <= eps1 < eps2 <= 1, got ({}, {})",
                self.eps1, self.eps2
            ));
        }
        Ok(())
    }
}

/// Level, floor and clamp range used to turn a fit into decisions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionParams {
    pub alpha: f64,
    /// Floor `epsilon` on the Lagrange level.
    pub epsilon: f64,
    pub winsor: WinsorBounds,
}

impl Default for DecisionParams {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            epsilon: 1e-10,
            winsor: WinsorBounds::default(),
        }
    }
}

impl DecisionParams {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_open_unit("alpha", self.alpha)?;
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return invalid(format!("epsilon must be non-negative, got {}", self.epsilon));
        }
        self.winsor.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionSet {
    pub alpha: f64,
    pub epsilon: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub gamma: f64,
    pub k: f64,
    pub tau_tilde: f64,
    /// `max(tau_tilde, epsilon)`.
    pub tau_hat: f64,
    pub pi_hat: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// `p_i <= min(t_i, gamma)`.
    pub rejected: Vec<bool>,
    /// Weighted-Bonferroni view of the thresholds.
    pub weights: Vec<f64>,
    pub warnings: Vec<String>,
}

impl DecisionSet {
    pub fn n_rejected(&self) -> usize {
        self.rejected.iter().filter(|&&r| r).count()
    }

    /// `sum_i y_i t_i / (1 - gamma)`.
    pub fn budget(&self, y: &[bool]) -> f64 {
        reduce::sum_by(y.len(), |i| if y[i] { self.thresholds[i] } else { 0.0 }) / (1.0 - self.gamma)
    }
}

/// Elementwise clamp into `[eps1, eps2]`.
pub fn winsorize_pi(pi_tilde: &[f64], eps1: f64, eps2: f64) -> Result<Vec<f64>> {
    WinsorBounds { eps1, eps2 }.validate()?;
    Ok(pi_tilde.iter().map(|&p| p.max(eps1).min(eps2)).collect())
}

/// `log((1 - pi) / pi)`.
#[inline]
fn log_odds_alt(pi: f64) -> f64 {
    (1.0 - pi).ln() - pi.ln()
}

/// Log-sum-exp over the selected terms, or `-inf` when none is selected.
fn log_sum_exp_where<F, S>(n: usize, select: S, term: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
    S: Fn(usize) -> bool + Sync,
{
    let max = (0..n)
        .filter(|&i| select(i))
        .map(&term)
        .fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    let sum = reduce::sum_by(n, |i| if select(i) { (term(i) - max).exp() } else { 0.0 });
    max + sum.ln()
}

/// Closed-form `tau_tilde` and `tau_hat = max(tau_tilde, epsilon)`.
///
/// `tau_tilde = k [sum_i y_i / (alpha (1 - gamma)) ((1 - pi_i) / pi_i)^(1/(1-k))]^(1-k)`,
/// and zero when no p-value is censored above `gamma`.
pub fn compute_tau(
    pi_hat: &[f64],
    y: &[bool],
    k: f64,
    alpha: f64,
    gamma: f64,
    epsilon: f64,
) -> Result<(f64, f64)> {
    if pi_hat.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            got: pi_hat.len(),
        });
    }
    check_open_unit("alpha", alpha)?;
    check_open_unit("gamma", gamma)?;
    check_open_unit("k", k)?;
    if !(epsilon >= 0.0) {
        return invalid(format!("epsilon must be non-negative, got {epsilon}"));
    }
    let power = 1.0 / (1.0 - k);
    let log_sum = log_sum_exp_where(pi_hat.len(), |i| y[i], |i| power * log_odds_alt(pi_hat[i]));
    let tau_tilde = if log_sum == f64::NEG_INFINITY {
        0.0
    } else {
        (k.ln() + (1.0 - k) * (log_sum - (alpha * (1.0 - gamma)).ln())).exp()
    };
    Ok((tau_tilde, tau_tilde.max(epsilon)))
}

/// `t_i = [(1 - pi_i) k / (pi_i tau)]^(1/(1-k))`.
pub fn threshold(pi_hat: f64, k: f64, tau_hat: f64) -> f64 {
    ((log_odds_alt(pi_hat) + k.ln() - tau_hat.ln()) / (1.0 - k)).exp()
}

/// Per-hypothesis thresholds and rejections at a given `tau_hat`.
pub fn thresholds_and_reject(
    table: &HypothesisTable,
    fit: &MixtureFit,
    tau: (f64, f64),
    params: &DecisionParams,
) -> Result<DecisionSet> {
    params.validate()?;
    let m = table.m();
    if fit.pi_tilde.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: fit.pi_tilde.len(),
        });
    }
    let (tau_tilde, tau_hat) = tau;
    let (k, gamma) = (fit.params.k, fit.gamma);
    let pi_hat = winsorize_pi(&fit.pi_tilde, params.winsor.eps1, params.winsor.eps2)?;
    let y: Vec<bool> = table.pvalues().iter().map(|&p| p > gamma).collect();
    let mut warnings = Vec::new();

    let mut thresholds: Vec<f64> = pi_hat.iter().map(|&pi| threshold(pi, k, tau_hat)).collect();
    if !y.iter().any(|&v| v) {
        let msg = format!(
            "no p-value exceeds gamma = {gamma}; thresholds are floor-driven and capped at gamma"
        );
        log::warn!("{msg}");
        warnings.push(msg);
        for t in thresholds.iter_mut() {
            *t = t.min(gamma);
        }
    }
    let rejected = table
        .pvalues()
        .iter()
        .zip(&thresholds)
        .map(|(&p, &t)| p <= t.min(gamma))
        .collect();
    let weights = bonferroni_weights(fit, &y, gamma, k)?;
    if weights.iter().any(|w| w.is_infinite()) {
        warnings.push("weighted-Bonferroni view undefined: no p-value exceeds gamma".to_string());
    }
    Ok(DecisionSet {
        alpha: params.alpha,
        epsilon: params.epsilon,
        eps1: params.winsor.eps1,
        eps2: params.winsor.eps2,
        gamma,
        k,
        tau_tilde,
        tau_hat,
        pi_hat,
        thresholds,
        rejected,
        weights,
        warnings,
    })
}

/// Full decision step: winsorize, compute `tau`, threshold and reject.
pub fn decide(table: &HypothesisTable, fit: &MixtureFit, params: &DecisionParams) -> Result<DecisionSet> {
    params.validate()?;
    let pi_hat = winsorize_pi(&fit.pi_tilde, params.winsor.eps1, params.winsor.eps2)?;
    let y: Vec<bool> = table.pvalues().iter().map(|&p| p > fit.gamma).collect();
    let tau = compute_tau(&pi_hat, &y, fit.params.k, params.alpha, fit.gamma, params.epsilon)?;
    thresholds_and_reject(table, fit, tau, params)
}

/// Weights `w_i` with `alpha w_i = t_i` when no winsorization or floor is
/// applied:
///
/// `w_i = exp(-x_i'b / (1-k)) / sum_j y_j / (1 - gamma) exp(-x_j'b / (1-k))`.
///
/// All weights are `+inf` when no p-value is censored above `gamma`.
pub fn bonferroni_weights(fit: &MixtureFit, y: &[bool], gamma: f64, k: f64) -> Result<Vec<f64>> {
    let eta = &fit.linear_predictor;
    if eta.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            got: eta.len(),
        });
    }
    check_open_unit("gamma", gamma)?;
    check_open_unit("k", k)?;
    let power = 1.0 / (1.0 - k);
    let log_norm = log_sum_exp_where(eta.len(), |i| y[i], |i| -eta[i] * power) - (1.0 - gamma).ln();
    if log_norm == f64::NEG_INFINITY {
        log::warn!("no p-value exceeds gamma = {gamma}; Bonferroni weights are infinite");
        return Ok(vec![f64::INFINITY; eta.len()]);
    }
    Ok(eta.iter().map(|&e| (-e * power - log_norm).exp()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{logistic, MixtureParams};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn fit_from_eta(eta: Vec<f64>, k: f64, gamma: f64) -> MixtureFit {
        let pi_tilde: Vec<f64> = eta.iter().map(|&e| logistic(e)).collect();
        MixtureFit {
            params: MixtureParams { beta: vec![0.0], k },
            gamma,
            pi_hat: pi_tilde.clone(),
            pi_tilde,
            linear_predictor: eta,
            loglik_trace: vec![],
            converged: true,
            iterations: 0,
        }
    }

    /// Solves the budget equation for `tau` by bisection on the inverse beta
    /// density, independent of the closed form.
    fn tau_by_bisection(pi: &[f64], y: &[bool], k: f64, alpha: f64, gamma: f64) -> f64 {
        let f1_inv = |v: f64| (v / k).powf(1.0 / (k - 1.0));
        let budget = |tau: f64| -> f64 {
            pi.iter()
                .zip(y)
                .filter(|(_, &y)| y)
                .map(|(&p, _)| f1_inv(p * tau / (1.0 - p)) / (1.0 - gamma))
                .sum()
        };
        let (mut lo, mut hi) = (1e-12f64, 1e12f64);
        for _ in 0..300 {
            let mid = (lo * hi).sqrt();
            if budget(mid) > alpha {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }

    #[test]
    fn winsorize_examples() {
        assert_eq!(winsorize_pi(&[0.5, 0.999, 1e-6], 0.01, 0.99).unwrap(), vec![0.5, 0.99, 0.01]);
        assert!(winsorize_pi(&[0.5], 0.5, 0.4).is_err());
        assert!(winsorize_pi(&[0.5], -0.1, 0.4).is_err());
    }

    #[test]
    fn single_hypothesis_chain() {
        let (tau_tilde, tau_hat) = compute_tau(&[0.5], &[true], 0.5, 0.05, 0.5, 1e-10).unwrap();
        assert_abs_diff_eq!(tau_tilde, 0.5 * 40f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(tau_tilde, 3.162278, epsilon = 1e-6);
        assert_eq!(tau_hat, tau_tilde);
        let oracle = tau_by_bisection(&[0.5], &[true], 0.5, 0.05, 0.5);
        assert_abs_diff_eq!(tau_tilde, oracle, epsilon = 1e-9);

        let table = HypothesisTable::intercept_only(vec![0.9]).unwrap();
        let fit = fit_from_eta(vec![0.0], 0.5, 0.5);
        let ds = decide(&table, &fit, &DecisionParams::default()).unwrap();
        assert_abs_diff_eq!(ds.thresholds[0], 0.025, epsilon = 1e-12);
        assert_abs_diff_eq!(ds.budget(&[true]), 0.05, epsilon = 1e-12);
        assert!(!ds.rejected[0]);
    }

    #[test]
    fn empty_censored_set_uses_floor() {
        let (tt, th) = compute_tau(&[0.5, 0.7], &[false, false], 0.5, 0.05, 0.5, 1e-10).unwrap();
        assert_eq!(tt, 0.0);
        assert_eq!(th, 1e-10);
        let table = HypothesisTable::intercept_only(vec![0.1, 0.3]).unwrap();
        let fit = fit_from_eta(vec![0.0, 0.8], 0.5, 0.5);
        let ds = decide(&table, &fit, &DecisionParams::default()).unwrap();
        assert!(ds.thresholds.iter().all(|&t| t == 0.5));
        assert!(!ds.warnings.is_empty());
        assert!(ds.weights.iter().all(|w| w.is_infinite()));
    }

    #[test]
    fn halving_alpha_scales_tau() {
        let pi = [0.3, 0.6, 0.95, 0.8];
        let y = [true, false, true, true];
        for k in [0.1, 0.5, 0.9] {
            let (a, _) = compute_tau(&pi, &y, k, 0.1, 0.4, 0.0).unwrap();
            let (b, _) = compute_tau(&pi, &y, k, 0.05, 0.4, 0.0).unwrap();
            assert_abs_diff_eq!(b / a, 2f64.powf(1.0 - k), epsilon = 1e-12);
            let oracle = tau_by_bisection(&pi, &y, k, 0.05, 0.4);
            assert_abs_diff_eq!(b / oracle, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn exchangeable_hypotheses_share_thresholds() {
        let table = HypothesisTable::intercept_only(vec![0.2, 0.7, 0.9, 0.01]).unwrap();
        let fit = fit_from_eta(vec![9.0; 4], 0.4, 0.5);
        let ds = decide(&table, &fit, &DecisionParams::default()).unwrap();
        assert!(ds.pi_hat.iter().all(|&p| p == 0.99));
        assert!(ds.thresholds.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn zero_pvalue_is_rejected() {
        let table = HypothesisTable::intercept_only(vec![0.0, 0.6, 0.8]).unwrap();
        let fit = fit_from_eta(vec![1.0, 1.0, 1.0], 0.3, 0.5);
        let ds = decide(&table, &fit, &DecisionParams::default()).unwrap();
        assert!(ds.thresholds[0] > 0.0);
        assert!(ds.rejected[0]);
    }

    #[test]
    fn weight_examples() {
        let fit = fit_from_eta(vec![0.7; 5], 0.3, 0.4);
        let w = bonferroni_weights(&fit, &[true; 5], 0.4, 0.3).unwrap();
        for v in w {
            assert_abs_diff_eq!(v, 0.6 / 5.0, epsilon = 1e-15);
        }
        let fit = fit_from_eta(vec![-2.3], 0.6, 0.25);
        let w = bonferroni_weights(&fit, &[true], 0.25, 0.6).unwrap();
        assert_abs_diff_eq!(w[0], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn weights_match_thresholds_without_winsorization() {
        let m = 300;
        let eta: Vec<f64> = (0..m).map(|i| ((i as f64) * 0.37).sin() * 4.0).collect();
        let p: Vec<f64> = (0..m).map(|i| ((i as f64) * 0.61).cos().abs()).collect();
        let table = HypothesisTable::intercept_only(p).unwrap();
        let fit = fit_from_eta(eta, 0.35, 0.3);
        let params = DecisionParams {
            alpha: 0.05,
            epsilon: 0.0,
            winsor: WinsorBounds::NONE,
        };
        let ds = decide(&table, &fit, &params).unwrap();
        for (w, t) in ds.weights.iter().zip(&ds.thresholds) {
            assert_abs_diff_eq!(params.alpha * w, *t, epsilon = 1e-10);
        }
    }

    #[test]
    fn design_matrix_is_not_consulted_for_thresholds() {
        let cov = Array2::from_shape_fn((3, 1), |(i, _)| i as f64);
        let table = HypothesisTable::new(crate::model::default_ids(3), vec![0.6, 0.7, 0.01], &cov).unwrap();
        let fit = fit_from_eta(vec![0.5, 1.0, 1.5], 0.5, 0.5);
        let ds = decide(&table, &fit, &DecisionParams::default()).unwrap();
        assert!(ds.thresholds[0] > ds.thresholds[1] && ds.thresholds[1] > ds.thresholds[2]);
    }

    proptest! {
        #[test]
        fn budget_is_tight_or_slack(
            pis in proptest::collection::vec(0.0f64..1.0, 1..80),
            ys in proptest::collection::vec(any::<bool>(), 80),
            k in 0.01f64..0.99,
            alpha in 0.001f64..0.3,
            gamma in 0.05f64..0.95,
            epsilon in prop_oneof![Just(1e-10), 0.0f64..50.0],
        ) {
            let m = pis.len();
            let y = &ys[..m];
            let pi_hat = winsorize_pi(&pis, 0.01, 0.99).unwrap();
            let (tt, th) = compute_tau(&pi_hat, y, k, alpha, gamma, epsilon).unwrap();
            prop_assert!(th >= epsilon);
            let sum: f64 = pi_hat.iter().zip(y).filter(|(_, &y)| y)
                .map(|(&p, _)| threshold(p, k, th)).sum::<f64>() / (1.0 - gamma);
            if y.iter().any(|&v| v) && tt >= epsilon {
                prop_assert!((sum - alpha).abs() <= 1e-8 * alpha.max(1.0), "{sum} vs {alpha}");
            } else {
                prop_assert!(sum <= alpha + 1e-8);
            }
        }

        #[test]
        fn thresholds_decrease_in_pi_and_tau(
            a in 0.01f64..0.99, b in 0.01f64..0.99, k in 0.01f64..0.95, tau in 0.01f64..100.0,
        ) {
            prop_assume!((a - b).abs() > 1e-6);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(threshold(lo, k, tau) > threshold(hi, k, tau));
            prop_assert!(threshold(a, k, tau) > threshold(a, k, tau * 1.5));
        }

        #[test]
        fn decisions_are_permutation_equivariant(seed in 0u64..1000) {
            let m = 40;
            let eta: Vec<f64> = (0..m).map(|i| (((i as u64 * 31 + seed) % 97) as f64) / 20.0 - 2.0).collect();
            let p: Vec<f64> = (0..m).map(|i| (((i as u64 * 17 + seed * 7) % 101) as f64) / 100.0).collect();
            let order: Vec<usize> = (0..m).map(|i| (i * 13 + seed as usize) % m).collect();
            let t1 = HypothesisTable::intercept_only(p.clone()).unwrap();
            let t2 = t1.permuted(&order).unwrap();
            let f1 = fit_from_eta(eta.clone(), 0.4, 0.5);
            let f2 = fit_from_eta(order.iter().map(|&i| eta[i]).collect(), 0.4, 0.5);
            let d1 = decide(&t1, &f1, &DecisionParams::default()).unwrap();
            let d2 = decide(&t2, &f2, &DecisionParams::default()).unwrap();
            for (r, &i) in order.iter().enumerate() {
                prop_assert_eq!(d2.rejected[r], d1.rejected[i]);
            }
        }
    }
}
