//! Shared domain types and the elementary mixture-model mathematics.
//!
//! The censored two-group model treats `y = 1{p > gamma}` as a mixture of
//! `Bern(1 - gamma)` under the null and `Bern(1 - gamma^k)` under a beta
//! alternative `f1(p) = k p^(k-1)`, with a logistic prior null probability.

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::reduce;

/// P-values and covariate rows for `m` hypotheses.
///
/// Column 0 of the design is the constant intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisTable {
    ids: Vec<String>,
    pvalues: Vec<f64>,
    design: Array2<f64>,
}

impl HypothesisTable {
    /// Builds a table from user covariates (`m x d`, no intercept column).
    pub fn new(ids: Vec<String>, pvalues: Vec<f64>, covariates: &Array2<f64>) -> Result<Self> {
        let m = pvalues.len();
        if covariates.nrows() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: covariates.nrows(),
            });
        }
        let d = covariates.ncols();
        let mut design = Array2::<f64>::ones((m, d + 1));
        design.slice_mut(ndarray::s![.., 1..]).assign(covariates);
        Self::from_design(ids, pvalues, design)
    }

    /// Builds a table from a full design matrix whose first column is all ones.
    pub fn from_design(ids: Vec<String>, pvalues: Vec<f64>, design: Array2<f64>) -> Result<Self> {
        let m = pvalues.len();
        if ids.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: ids.len(),
            });
        }
        if design.nrows() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: design.nrows(),
            });
        }
        if design.ncols() == 0 {
            return invalid("design matrix needs an intercept column");
        }
        if let Some(i) = pvalues.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return invalid(format!("p-value {} at row {i} is outside [0, 1]", pvalues[i]));
        }
        if let Some(i) = design.column(0).iter().position(|&v| v != 1.0) {
            return invalid(format!("intercept column is not 1 at row {i}"));
        }
        if design.iter().any(|v| !v.is_finite()) {
            return invalid("covariates contain NaN or infinite values");
        }
        // Row-major storage keeps per-hypothesis rows contiguous.
        let design = if design.is_standard_layout() {
            design
        } else {
            design.as_standard_layout().into_owned()
        };
        Ok(Self {
            ids,
            pvalues,
            design,
        })
    }

    /// Intercept-only table with generated ids.
    pub fn intercept_only(pvalues: Vec<f64>) -> Result<Self> {
        let m = pvalues.len();
        Self::new(default_ids(m), pvalues, &Array2::zeros((m, 0)))
    }

    pub fn m(&self) -> usize {
        self.pvalues.len()
    }

    /// Number of user covariates (excluding the intercept).
    pub fn d(&self) -> usize {
        self.design.ncols() - 1
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn pvalues(&self) -> &[f64] {
        &self.pvalues
    }

    /// Design matrix including the intercept column.
    pub fn design(&self) -> &Array2<f64> {
        &self.design
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.design.row(i)
    }

    /// User covariates without the intercept column.
    pub fn covariates(&self) -> Array2<f64> {
        self.design.slice(ndarray::s![.., 1..]).to_owned()
    }

    /// Copy of the table with p-values replaced.
    pub fn with_pvalues(&self, pvalues: Vec<f64>) -> Result<Self> {
        Self::from_design(self.ids.clone(), pvalues, self.design.clone())
    }

    /// Copy of the table with p-value `j` set to `value`.
    pub fn with_pvalue_at(&self, j: usize, value: f64) -> Result<Self> {
        if j >= self.m() {
            return invalid(format!("index {j} out of range for m = {}", self.m()));
        }
        let mut p = self.pvalues.clone();
        p[j] = value;
        self.with_pvalues(p)
    }

    /// Reorders hypotheses so that new row `r` is old row `order[r]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.m() {
            return Err(Error::DimensionMismatch {
                expected: self.m(),
                got: order.len(),
            });
        }
        let ids = order.iter().map(|&i| self.ids[i].clone()).collect();
        let pvalues = order.iter().map(|&i| self.pvalues[i]).collect();
        let design = self.design.select(Axis(0), order);
        Self::from_design(ids, pvalues, design)
    }

    /// Applies `design * beta` for every row.
    pub fn linear_predictor(&self, beta: &[f64]) -> Result<Vec<f64>> {
        if beta.len() != self.design.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.design.ncols(),
                got: beta.len(),
            });
        }
        Ok(linear_predictor(&self.design, beta))
    }
}

pub fn default_ids(m: usize) -> Vec<String> {
    (0..m).map(|i| format!("h{}", i + 1)).collect()
}

pub(crate) fn linear_predictor(design: &Array2<f64>, beta: &[f64]) -> Vec<f64> {
    use rayon::prelude::*;
    let p = design.ncols();
    let flat = design
        .as_slice()
        .expect("design is stored in standard layout");
    if p == 0 {
        return vec![0.0; design.nrows()];
    }
    flat.par_chunks(p)
        .map(|row| row.iter().zip(beta).map(|(x, b)| x * b).sum())
        .collect()
}

/// Censored p-values `y_i = 1{p_i > gamma}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CensoredData {
    pub y: Vec<bool>,
    pub gamma: f64,
}

impl CensoredData {
    pub fn count_above(&self) -> usize {
        self.y.iter().filter(|&&v| v).count()
    }
}

/// Censors p-values at level `gamma` (strict inequality).
pub fn censor(pvalues: &[f64], gamma: f64) -> Result<CensoredData> {
    check_open_unit("gamma", gamma)?;
    Ok(CensoredData {
        y: pvalues.iter().map(|&p| p > gamma).collect(),
        gamma,
    })
}

/// Box constraints on `(beta, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    /// Every coefficient is confined to `[-beta_bound, beta_bound]`.
    pub beta_bound: f64,
    pub k_min: f64,
    pub k_max: f64,
}

impl Default for ParamBounds {
    fn default() -> Self {
        Self {
            beta_bound: 15.0,
            k_min: 0.001,
            k_max: 0.999,
        }
    }
}

impl ParamBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_bound > 0.0 && self.beta_bound.is_finite()) {
            return invalid(format!("beta bound must be positive, got {}", self.beta_bound));
        }
        if !(0.0 < self.k_min && self.k_min < self.k_max && self.k_max < 1.0) {
            return invalid(format!(
                "need 0 < k_min < k_max < 1, got ({}, {})",
                self.k_min, self.k_max
            ));
        }
        Ok(())
    }

    pub fn clip_k(&self, k: f64) -> f64 {
        k.clamp(self.k_min, self.k_max)
    }

    pub fn clip_beta(&self, b: f64) -> f64 {
        b.clamp(-self.beta_bound, self.beta_bound)
    }
}

/// Logistic coefficients and the beta-alternative shape `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub beta: Vec<f64>,
    pub k: f64,
}

impl MixtureParams {
    pub fn new(beta: Vec<f64>, k: f64, bounds: &ParamBounds) -> Result<Self> {
        let params = Self { beta, k };
        params.validate(bounds)?;
        Ok(params)
    }

    pub fn validate(&self, bounds: &ParamBounds) -> Result<()> {
        if !(bounds.k_min <= self.k && self.k <= bounds.k_max) {
            return invalid(format!(
                "k = {} outside [{}, {}]",
                self.k, bounds.k_min, bounds.k_max
            ));
        }
        if let Some(b) = self
            .beta
            .iter()
            .find(|b| !(b.abs() <= bounds.beta_bound))
        {
            return invalid(format!("coefficient {b} outside the box +/-{}", bounds.beta_bound));
        }
        Ok(())
    }
}

/// Result of an EM fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureFit {
    pub params: MixtureParams,
    pub gamma: f64,
    /// `x_i' beta` at the final coefficients.
    pub linear_predictor: Vec<f64>,
    /// Raw logistic null probabilities.
    pub pi_tilde: Vec<f64>,
    /// Winsorized null probabilities in `[eps1, eps2]`.
    pub pi_hat: Vec<f64>,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Numerically stable `1 / (1 + exp(-eta))`.
#[inline]
pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(1 / (1 + exp(-eta)))`.
#[inline]
#[cfg(test)]
pub(crate) fn log_logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        -(-eta).exp().ln_1p()
    } else {
        eta - eta.exp().ln_1p()
    }
}

/// Prior null probability `pi(x) = (1 + exp(-x'beta))^-1`.
pub fn logistic_pi(x: &[f64], beta: &[f64]) -> Result<f64> {
    if x.len() != beta.len() {
        return Err(Error::DimensionMismatch {
            expected: beta.len(),
            got: x.len(),
        });
    }
    let eta: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
    Ok(logistic(eta))
}

/// The censored-Bernoulli likelihoods under the null (`b0`) and the beta
/// alternative (`b1`), indexed by `y`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BernoulliTerms {
    pub b0: [f64; 2],
    pub b1: [f64; 2],
}

impl BernoulliTerms {
    pub fn new(gamma: f64, k: f64) -> Self {
        let gamma_k = (k * gamma.ln()).exp();
        let one_minus_gamma_k = -(k * gamma.ln()).exp_m1();
        Self {
            b0: [gamma, 1.0 - gamma],
            b1: [gamma_k, one_minus_gamma_k],
        }
    }

    #[inline]
    pub fn get(&self, y: bool) -> (f64, f64) {
        let idx = y as usize;
        (self.b0[idx], self.b1[idx])
    }
}

/// `b0 = (1-gamma)^y gamma^(1-y)` and `b1 = (1-gamma^k)^y gamma^(k(1-y))`.
pub fn mixture_bernoulli_terms(y: bool, gamma: f64, k: f64) -> Result<(f64, f64)> {
    check_open_unit("gamma", gamma)?;
    check_open_unit("k", k)?;
    Ok(BernoulliTerms::new(gamma, k).get(y))
}

/// Quasi log-likelihood `sum_i log(pi_i b0_i + (1 - pi_i) b1_i)`.
pub fn quasi_loglik(
    table: &HypothesisTable,
    censored: &CensoredData,
    params: &MixtureParams,
) -> Result<f64> {
    if censored.y.len() != table.m() {
        return Err(Error::DimensionMismatch {
            expected: table.m(),
            got: censored.y.len(),
        });
    }
    check_open_unit("gamma", censored.gamma)?;
    check_open_unit("k", params.k)?;
    let eta = table.linear_predictor(&params.beta)?;
    Ok(loglik_from_eta(&eta, &censored.y, censored.gamma, params.k))
}

pub(crate) fn loglik_from_eta(eta: &[f64], y: &[bool], gamma: f64, k: f64) -> f64 {
    let terms = BernoulliTerms::new(gamma, k);
    reduce::sum_by(eta.len(), |i| {
        let pi = logistic(eta[i]);
        let (b0, b1) = terms.get(y[i]);
        (pi * b0 + (1.0 - pi) * b1).ln()
    })
}

pub(crate) fn check_open_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        invalid(format!("{name} must lie in (0, 1), got {v}"))
    }
}
