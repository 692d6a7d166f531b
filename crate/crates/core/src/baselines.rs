//! Reference procedures: Bonferroni, Holm, weighted Bonferroni and the
//! oracle rule that knows the true prior and alternative density.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{invalid, Error, Result};
use crate::reduce;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

fn std_normal() -> Normal {
    Normal::standard()
}

/// Alternative p-value density for one-sided p-values `p = 1 - Phi(z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum AlternativeSpec {
    /// `f1(p) = k p^(k-1)`.
    Beta { k: f64 },
    /// `z ~ N(shift, 1)`.
    NormalShift { shift: f64 },
    /// `z = shift - sqrt(2) + G` with `G ~ Gamma(shape 2, scale 1/sqrt(2))`,
    /// which has mean `shift` and unit variance.
    ShiftedGamma { shift: f64 },
}

impl AlternativeSpec {
    /// Smallest shift for which the shifted-gamma likelihood ratio is monotone.
    pub const SHIFTED_GAMMA_MIN_SHIFT: f64 = 2.0 * SQRT_2 - 2.0;

    pub fn validate(&self) -> Result<()> {
        match *self {
            AlternativeSpec::Beta { k } if !(k > 0.0 && k < 1.0) => {
                Err(Error::UnsupportedFamily(format!("beta alternative needs k in (0, 1), got {k}")))
            }
            AlternativeSpec::NormalShift { shift } if !(shift > 0.0 && shift.is_finite()) => Err(
                Error::UnsupportedFamily(format!(
                    "normal shift {shift} does not give a strictly decreasing density"
                )),
            ),
            AlternativeSpec::ShiftedGamma { shift }
                if !(shift >= Self::SHIFTED_GAMMA_MIN_SHIFT && shift.is_finite()) =>
            {
                Err(Error::UnsupportedFamily(format!(
                    "shifted-gamma density is not monotone for shift {shift} < {:.6}",
                    Self::SHIFTED_GAMMA_MIN_SHIFT
                )))
            }
            _ => Ok(()),
        }
    }
}

const GAMMA_SCALE: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Upper-tail quantile: `z` with `1 - Phi(z) = p`.
fn z_of_p(p: f64) -> f64 {
    -std_normal().inverse_cdf(p)
}

fn p_of_z(z: f64) -> f64 {
    std_normal().sf(z)
}

/// `log(g(z) / phi(z))` for the shifted gamma; `-inf` at or below the location.
fn shifted_gamma_log_ratio(shift: f64, z: f64) -> f64 {
    let location = shift - SQRT_2;
    let s = z - location;
    if s <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let log_g = s.ln() - 2.0 * GAMMA_SCALE.ln() - s / GAMMA_SCALE;
    log_g - std_normal().ln_pdf(z)
}

/// Alternative density at `p`.
pub fn f1_density(spec: &AlternativeSpec, p: f64) -> Result<f64> {
    spec.validate()?;
    if !(p > 0.0 && p <= 1.0) {
        return invalid(format!("p must lie in (0, 1], got {p}"));
    }
    Ok(match *spec {
        AlternativeSpec::Beta { k } => k * p.powf(k - 1.0),
        AlternativeSpec::NormalShift { shift } => {
            let z = z_of_p(p);
            (shift * z - 0.5 * shift * shift).exp()
        }
        AlternativeSpec::ShiftedGamma { shift } => shifted_gamma_log_ratio(shift, z_of_p(p)).exp(),
    })
}

/// Inverse of the (decreasing) alternative density: the largest `p` with
/// `f1(p) >= v`, equal to 1 once `v <= f1(1)`.
pub fn f1_inverse(spec: &AlternativeSpec, v: f64) -> Result<f64> {
    spec.validate()?;
    if v.is_nan() {
        return invalid("density level is NaN");
    }
    Ok(f1_inverse_unchecked(spec, v))
}

fn f1_inverse_unchecked(spec: &AlternativeSpec, v: f64) -> f64 {
    if v <= 0.0 {
        return 1.0;
    }
    if v == f64::INFINITY {
        return 0.0;
    }
    match *spec {
        AlternativeSpec::Beta { k } => (v / k).powf(1.0 / (k - 1.0)).min(1.0),
        AlternativeSpec::NormalShift { shift } => {
            let z = (v.ln() + 0.5 * shift * shift) / shift;
            p_of_z(z)
        }
        AlternativeSpec::ShiftedGamma { shift } => {
            let target = v.ln();
            let mut lo = shift - SQRT_2;
            let mut hi = lo + 1.0;
            while shifted_gamma_log_ratio(shift, hi) < target {
                hi = lo + 2.0 * (hi - lo);
                if hi > 50.0 {
                    return 0.0;
                }
            }
            // p changes by at most phi(z) <= 0.4 per unit z
            for _ in 0..200 {
                if hi - lo <= 1e-13 {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                if shifted_gamma_log_ratio(shift, mid) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            p_of_z(hi)
        }
    }
}

/// Output of [`oracle_reject`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleDecision {
    pub alpha: f64,
    pub tau: f64,
    pub thresholds: Vec<f64>,
    pub rejected: Vec<bool>,
}

impl OracleDecision {
    /// `sum_i pi_i t_i`.
    pub fn budget(&self, pi_true: &[f64]) -> f64 {
        pi_true.iter().zip(&self.thresholds).map(|(p, t)| p * t).sum()
    }
}

fn oracle_threshold(spec: &AlternativeSpec, pi: f64, tau: f64) -> f64 {
    f1_inverse_unchecked(spec, pi * tau / (1.0 - pi))
}

/// Optimal rule with the true null probabilities and alternative density:
/// `tau* = min{tau > 0 : sum_i pi_i f1^-1(pi_i tau / (1 - pi_i)) <= alpha}`,
/// found by bisection in `log(tau)`.
pub fn oracle_reject(
    pvalues: &[f64],
    pi_true: &[f64],
    spec: &AlternativeSpec,
    alpha: f64,
) -> Result<OracleDecision> {
    spec.validate()?;
    if pvalues.len() != pi_true.len() {
        return Err(Error::DimensionMismatch {
            expected: pvalues.len(),
            got: pi_true.len(),
        });
    }
    if pi_true.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return invalid("true null probabilities must lie in (0, 1)");
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    let budget = |tau: f64| {
        reduce::sum_by(pi_true.len(), |i| pi_true[i] * oracle_threshold(spec, pi_true[i], tau))
    };

    let (mut lo, mut hi) = (1e-12f64, 1e12f64);
    while budget(hi) > alpha {
        hi *= 1e3;
        if !hi.is_finite() {
            return invalid("oracle budget cannot be met");
        }
    }
    let mut slack = false;
    while budget(lo) <= alpha {
        lo *= 1e-3;
        if lo < 1e-300 {
            slack = true;
            break;
        }
    }
    let tau = if slack {
        0.0
    } else {
        while hi / lo - 1.0 > 1e-12 {
            let mid = (lo * hi).sqrt();
            if mid <= lo || mid >= hi {
                break;
            }
            if budget(mid) > alpha {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };
    let thresholds: Vec<f64> = pi_true.iter().map(|&pi| oracle_threshold(spec, pi, tau)).collect();
    let rejected = pvalues.iter().zip(&thresholds).map(|(&p, &t)| p <= t).collect();
    Ok(OracleDecision {
        alpha,
        tau,
        thresholds,
        rejected,
    })
}

/// Reject when `p_i <= alpha / m`.
pub fn bonferroni(pvalues: &[f64], alpha: f64) -> Vec<bool> {
    let cutoff = alpha / pvalues.len() as f64;
    pvalues.iter().map(|&p| p <= cutoff).collect()
}

/// Holm's step-down procedure; ties are ordered by original index.
pub fn holm(pvalues: &[f64], alpha: f64) -> Vec<bool> {
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]).then(a.cmp(&b)));
    let mut rejected = vec![false; m];
    for (rank, &i) in order.iter().enumerate() {
        if pvalues[i] > alpha / (m - rank) as f64 {
            break;
        }
        rejected[i] = true;
    }
    rejected
}

/// Reject when `p_i < alpha / (m pi_i)` (strict).
pub fn weighted_bonferroni(pvalues: &[f64], pi_hat: &[f64], alpha: f64) -> Result<Vec<bool>> {
    if pvalues.len() != pi_hat.len() {
        return Err(Error::DimensionMismatch {
            expected: pvalues.len(),
            got: pi_hat.len(),
        });
    }
    if pi_hat.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return invalid("weights need pi in (0, 1]");
    }
    let m = pvalues.len() as f64;
    Ok(pvalues
        .iter()
        .zip(pi_hat)
        .map(|(&p, &pi)| p < alpha / (m * pi))
        .collect())
}
