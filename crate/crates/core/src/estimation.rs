//! Censoring-level selection, initialization and the EM fit of `(beta, k)`.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::decision::{winsorize_pi, WinsorBounds};
use crate::error::{invalid, Error, Result};
use crate::model::{
    self, check_open_unit, logistic, BernoulliTerms, CensoredData, HypothesisTable,
    MixtureFit, MixtureParams, ParamBounds,
};
use crate::reduce;

struct EmState {
    beta: Vec<f64>,
    k: f64,
    eta: Vec<f64>,
    loglik: f64,
}

/// Squared extrapolation from three successive EM iterates, clipped to the
/// parameter bounds. `scale` shrinks the step length towards the plain double
/// step. `None` when the iterates do not move or the step is no longer an
/// extrapolation.
fn extrapolate(
    t0: &EmState,
    t1: &EmState,
    t2: &EmState,
    scale: f64,
    opts: &EmOptions,
) -> Option<(Vec<f64>, f64)> {
    let flat = |s: &EmState| {
        let mut v = s.beta.clone();
        if opts.fixed_k.is_none() {
            v.push(s.k);
        }
        v
    };
    let (a, b, c) = (flat(t0), flat(t1), flat(t2));
    let r: Vec<f64> = b.iter().zip(&a).map(|(b, a)| b - a).collect();
    let v: Vec<f64> = c.iter().zip(&b).zip(&r).map(|((c, b), r)| c - b - r).collect();
    let norm = |x: &[f64]| x.iter().map(|e| e * e).sum::<f64>().sqrt();
    let (nr, nv) = (norm(&r), norm(&v));
    if !(nr > 0.0 && nv > 0.0) {
        return None;
    }
    let full = -nr / nv;
    if full >= -1.0 {
        return None;
    }
    let step = -1.0 + scale * (full + 1.0);
    let point: Vec<f64> = a
        .iter()
        .zip(&r)
        .zip(&v)
        .map(|((a, r), v)| a - 2.0 * step * r + step * step * v)
        .collect();
    if point.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let n_coef = t0.beta.len();
    let beta = point[..n_coef].iter().map(|&x| opts.bounds.clip_beta(x)).collect();
    let k = match opts.fixed_k {
        Some(k) => k,
        None => opts.bounds.clip_k(point[n_coef]),
    };
    Some((beta, k))
}

/// Settings for [`fit_em`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iterations: usize,
    /// Relative change of the quasi log-likelihood that stops the iteration.
    pub tol: f64,
    /// Hold `k` fixed at this value and update `beta` only.
    pub fixed_k: Option<f64>,
    pub irls_max_iter: usize,
    /// Gradient-norm tolerance of the Newton M-step.
    pub irls_tol: f64,
    pub bounds: ParamBounds,
    pub winsor: WinsorBounds,
    /// Squared-extrapolation acceleration. An extrapolated point is kept only
    /// when the EM step taken from it does not lower the likelihood, so the
    /// trace stays non-decreasing. Off by default: on flat likelihood ridges
    /// the extrapolation amplifies rounding, and fits then depend on the row
    /// order at the level of the convergence tolerance.
    #[serde(default)]
    pub accelerate: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tol: 1e-6,
            fixed_k: None,
            irls_max_iter: 25,
            irls_tol: 1e-8,
            bounds: ParamBounds::default(),
            winsor: WinsorBounds::default(),
            accelerate: false,
        }
    }
}

impl EmOptions {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        self.winsor.validate()?;
        if self.max_iterations == 0 || self.irls_max_iter == 0 {
            return invalid("iteration limits must be positive");
        }
        if !(self.tol > 0.0 && self.irls_tol > 0.0) {
            return invalid("tolerances must be strictly positive");
        }
        if let Some(k) = self.fixed_k {
            if !(self.bounds.k_min < k && k < self.bounds.k_max) {
                return invalid(format!(
                    "fixed k = {k} outside ({}, {})",
                    self.bounds.k_min, self.bounds.k_max
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Storey null-proportion estimate and censoring level
// ---------------------------------------------------------------------------

const PI0_FLOOR: f64 = 1e-8;

/// `0.05, 0.10, ..., 0.95`.
pub fn default_lambda_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

/// Plug-in null proportion `#{p > lambda} / (m (1 - lambda))`, clipped to `(0, 1]`.
pub fn storey_plugin(pvalues: &[f64], lambda: f64) -> f64 {
    let above = pvalues.iter().filter(|&&p| p > lambda).count();
    plugin_from_count(above, pvalues.len(), lambda)
}

fn plugin_from_count(above: usize, m: usize, lambda: f64) -> f64 {
    (above as f64 / (m as f64 * (1.0 - lambda))).clamp(PI0_FLOOR, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreyEstimate {
    /// Null-proportion estimate at the selected lambda.
    pub pi_s: f64,
    /// Selected lambda, used as the censoring level.
    pub gamma: f64,
    pub lambda_grid: Vec<f64>,
    pub pi_by_lambda: Vec<f64>,
    pub bootstrap_mse: Vec<f64>,
}

/// Storey's bootstrap choice of lambda; the winner doubles as `gamma`.
///
/// Each bootstrap resample draws `m` p-values with replacement. Only the
/// counts falling between consecutive grid points matter, so a resample is
/// drawn as one multinomial vector over those bins.
pub fn storey_pi0_and_gamma(
    pvalues: &[f64],
    lambda_grid: &[f64],
    n_boot: usize,
    rng_seed: u64,
) -> Result<StoreyEstimate> {
    let m = pvalues.len();
    if m == 0 {
        return invalid("no p-values supplied");
    }
    if lambda_grid.is_empty() {
        return invalid("lambda grid is empty");
    }
    if lambda_grid.iter().any(|&l| !(l > 0.0 && l < 1.0)) {
        return invalid("lambda grid must lie in (0, 1)");
    }
    if lambda_grid.windows(2).any(|w| w[0] >= w[1]) {
        return invalid("lambda grid must be strictly ascending");
    }
    if n_boot == 0 {
        return invalid("bootstrap count must be positive");
    }
    let n_lambda = lambda_grid.len();

    // bins[0] = #{p <= l_1}, bins[j] = #{l_j < p <= l_{j+1}}, bins[L] = #{p > l_L}
    let mut bins = vec![0usize; n_lambda + 1];
    for &p in pvalues {
        bins[lambda_grid.partition_point(|&l| l < p)] += 1;
    }
    let above_from_bins = |bins: &[usize]| -> Vec<usize> {
        let mut above = vec![0usize; n_lambda];
        let mut acc = 0;
        for j in (0..n_lambda).rev() {
            acc += bins[j + 1];
            above[j] = acc;
        }
        above
    };

    let pi_by_lambda: Vec<f64> = above_from_bins(&bins)
        .iter()
        .zip(lambda_grid)
        .map(|(&a, &l)| plugin_from_count(a, m, l))
        .collect();
    let pi_min = pi_by_lambda.iter().copied().fold(f64::INFINITY, f64::min);

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut mse = vec![0.0; n_lambda];
    let mut boot_bins = vec![0usize; n_lambda + 1];
    for _ in 0..n_boot {
        let mut remaining = m as u64;
        let mut mass_left = m;
        for (b, &count) in boot_bins.iter_mut().zip(&bins) {
            if remaining == 0 || mass_left == 0 {
                *b = 0;
                continue;
            }
            let prob = (count as f64 / mass_left as f64).min(1.0);
            let draw = Binomial::new(remaining, prob)
                .expect("bin probability lies in [0, 1]")
                .sample(&mut rng);
            *b = draw as usize;
            remaining -= draw;
            mass_left -= count;
        }
        for ((acc, &a), &l) in mse.iter_mut().zip(&above_from_bins(&boot_bins)).zip(lambda_grid) {
            let diff = plugin_from_count(a, m, l) - pi_min;
            *acc += diff * diff;
        }
    }
    for v in mse.iter_mut() {
        *v /= n_boot as f64;
    }

    let mut best = 0;
    for j in 1..n_lambda {
        if mse[j] < mse[best] {
            best = j;
        }
    }
    Ok(StoreyEstimate {
        pi_s: pi_by_lambda[best],
        gamma: lambda_grid[best],
        lambda_grid: lambda_grid.to_vec(),
        pi_by_lambda,
        bootstrap_mse: mse,
    })
}

// ---------------------------------------------------------------------------
// Small-p-value initializer
// ---------------------------------------------------------------------------

/// Starting values for the EM iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitEstimate {
    /// `(logit(pi_tilde), 0, ..., 0)`.
    pub beta0: Vec<f64>,
    pub k0: f64,
    /// Cutoff defining the small p-values.
    pub u: f64,
    /// Number of p-values strictly below `u`.
    pub n_small: usize,
    pub pi_s: f64,
    pub pi_tilde: f64,
    /// Set when no p-value fell below `u` and the neutral start was used.
    pub neutral: bool,
}

impl InitEstimate {
    /// `beta = 0`, `k = 0.5`.
    pub fn neutral(n_coef: usize, u: f64, pi_s: f64) -> Self {
        Self {
            beta0: vec![0.0; n_coef],
            k0: 0.5,
            u,
            n_small: 0,
            pi_s,
            pi_tilde: 0.5,
            neutral: true,
        }
    }
}

fn kth_smallest(pvalues: &[f64], k: usize) -> f64 {
    let mut work = pvalues.to_vec();
    let idx = k.clamp(1, work.len()) - 1;
    let (_, v, _) = work.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
    *v
}

/// Cutoff `u`: the largest of the `m (1 - pi_s)` smallest p-values, or the
/// 0.01-quantile when `pi_s = 1`.
pub fn small_p_cutoff(pvalues: &[f64], pi_s: f64) -> f64 {
    let m = pvalues.len() as f64;
    let n_signal = (m * (1.0 - pi_s) - 1e-9).ceil();
    if n_signal >= 1.0 {
        kth_smallest(pvalues, n_signal as usize)
    } else {
        kth_smallest(pvalues, (0.01 * m).ceil() as usize)
    }
}

#[inline]
fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Conditional log-likelihood of `pi + (1 - pi) k p^(k-1)` given `p < u`.
///
/// `log_p` holds the logs of the p-values below `u`.
pub fn small_p_objective(log_p: &[f64], u: f64, pi: f64, k: f64) -> f64 {
    let ln_pi = pi.ln();
    let ln_alt = (1.0 - pi).ln() + k.ln();
    let ln_u = u.ln();
    let sum = reduce::sum_by(log_p.len(), |i| log_add_exp(ln_pi, ln_alt + (k - 1.0) * log_p[i]));
    let norm = log_add_exp(ln_pi + ln_u, (1.0 - pi).ln() + k * ln_u);
    sum - log_p.len() as f64 * norm
}

/// Maximizes [`small_p_objective`] over `(0, 1)^2`: a 50 x 50 grid followed
/// by Nelder-Mead in logit coordinates. Returns `(pi, k, n_small)`.
pub fn fit_small_p_mixture(pvalues: &[f64], u: f64) -> Option<(f64, f64, usize)> {
    let log_p: Vec<f64> = pvalues
        .iter()
        .filter(|&&p| p < u)
        .map(|&p| p.max(f64::MIN_POSITIVE).ln())
        .collect();
    if log_p.is_empty() || !(u > 0.0) {
        return None;
    }
    let objective = |pi: f64, k: f64| small_p_objective(&log_p, u, pi, k);

    const GRID: usize = 50;
    let node = |i: usize| (i as f64 + 0.5) / GRID as f64;
    let mut best = (f64::NEG_INFINITY, 0.5, 0.5);
    for i in 0..GRID {
        for j in 0..GRID {
            let (pi, k) = (node(i), node(j));
            let v = objective(pi, k);
            if v > best.0 {
                best = (v, pi, k);
            }
        }
    }

    let logit = |v: f64| (v / (1.0 - v)).ln();
    let neg = |z: &[f64; 2]| {
        let v = objective(logistic(z[0]), logistic(z[1]));
        if v.is_nan() {
            f64::INFINITY
        } else {
            -v
        }
    };
    let (z, fz) = nelder_mead(neg, [logit(best.1), logit(best.2)], 0.25, 400);
    let (pi, k) = if -fz >= best.0 {
        (logistic(z[0]), logistic(z[1]))
    } else {
        (best.1, best.2)
    };
    Some((pi, k, log_p.len()))
}

/// Minimizes `f` over the plane. Coordinates are kept within `[-40, 40]`.
fn nelder_mead<F>(f: F, start: [f64; 2], step: f64, max_iter: usize) -> ([f64; 2], f64)
where
    F: Fn(&[f64; 2]) -> f64,
{
    let clamp = |p: [f64; 2]| [p[0].clamp(-40.0, 40.0), p[1].clamp(-40.0, 40.0)];
    let mut simplex = [
        start,
        clamp([start[0] + step, start[1]]),
        clamp([start[0], start[1] + step]),
    ];
    let mut values = simplex.map(|p| f(&p));
    let lerp = |a: [f64; 2], b: [f64; 2], t: f64| clamp([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);

    for _ in 0..max_iter {
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.map(|i| simplex[i]);
        values = order.map(|i| values[i]);

        let spread = (values[2] - values[0]).abs();
        let diameter = simplex
            .iter()
            .skip(1)
            .map(|p| (p[0] - simplex[0][0]).abs().max((p[1] - simplex[0][1]).abs()))
            .fold(0.0, f64::max);
        if spread <= 1e-12 * (1.0 + values[0].abs()) && diameter <= 1e-9 {
            break;
        }

        let centroid = [
            0.5 * (simplex[0][0] + simplex[1][0]),
            0.5 * (simplex[0][1] + simplex[1][1]),
        ];
        let reflected = lerp(centroid, simplex[2], -1.0);
        let fr = f(&reflected);
        if fr < values[0] {
            let expanded = lerp(centroid, simplex[2], -2.0);
            let fe = f(&expanded);
            if fe < fr {
                simplex[2] = expanded;
                values[2] = fe;
            } else {
                simplex[2] = reflected;
                values[2] = fr;
            }
        } else if fr < values[1] {
            simplex[2] = reflected;
            values[2] = fr;
        } else {
            let (contracted, fc) = if fr < values[2] {
                let c = lerp(centroid, simplex[2], -0.5);
                (c, f(&c))
            } else {
                let c = lerp(centroid, simplex[2], 0.5);
                (c, f(&c))
            };
            if fc < values[2].min(fr) {
                simplex[2] = contracted;
                values[2] = fc;
            } else {
                for i in 1..3 {
                    simplex[i] = lerp(simplex[0], simplex[i], 0.5);
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = (0..3).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    (simplex[best], values[best])
}

/// Initial `(beta, k)` from the small p-values.
///
/// `n_coef` is the length of the coefficient vector (`d + 1`).
pub fn init_small_p(
    pvalues: &[f64],
    pi_s: f64,
    n_coef: usize,
    bounds: &ParamBounds,
) -> Result<InitEstimate> {
    if pvalues.is_empty() {
        return invalid("no p-values supplied");
    }
    if !(pi_s > 0.0 && pi_s <= 1.0) {
        return invalid(format!("pi_s must lie in (0, 1], got {pi_s}"));
    }
    if n_coef == 0 {
        return invalid("coefficient vector needs an intercept");
    }
    bounds.validate()?;
    let u = small_p_cutoff(pvalues, pi_s);
    let Some((pi, k, n_small)) = fit_small_p_mixture(pvalues, u) else {
        log::warn!("no p-values below the initializer cutoff u = {u}; using the neutral start");
        return Ok(InitEstimate::neutral(n_coef, u, pi_s));
    };
    let mut beta0 = vec![0.0; n_coef];
    beta0[0] = bounds.clip_beta((pi / (1.0 - pi)).ln());
    Ok(InitEstimate {
        beta0,
        k0: bounds.clip_k(k),
        u,
        n_small,
        pi_s,
        pi_tilde: pi,
        neutral: false,
    })
}

// ---------------------------------------------------------------------------
// EM steps
// ---------------------------------------------------------------------------

/// Posterior null probabilities given the censored data.
pub fn e_step(
    table: &HypothesisTable,
    censored: &CensoredData,
    params: &MixtureParams,
) -> Result<Vec<f64>> {
    if censored.y.len() != table.m() {
        return Err(Error::DimensionMismatch {
            expected: table.m(),
            got: censored.y.len(),
        });
    }
    check_open_unit("gamma", censored.gamma)?;
    check_open_unit("k", params.k)?;
    let eta = table.linear_predictor(&params.beta)?;
    Ok(e_step_eta(&eta, &censored.y, &BernoulliTerms::new(censored.gamma, params.k)))
}

fn e_step_eta(eta: &[f64], y: &[bool], terms: &BernoulliTerms) -> Vec<f64> {
    use rayon::prelude::*;
    eta.par_iter()
        .zip(y.par_iter())
        .map(|(&e, &yi)| {
            let pi = logistic(e);
            let (b0, b1) = terms.get(yi);
            let null = pi * b0;
            null / (null + (1.0 - pi) * b1)
        })
        .collect()
}

/// Output of [`m_step_beta`].
#[derive(Debug, Clone, PartialEq)]
pub struct BetaUpdate {
    pub beta: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Gradient norm over the coordinates not pinned to the box.
    pub gradient_norm: f64,
}

/// Weighted Bernoulli log-likelihood `sum Q log(pi) + (1 - Q) log(1 - pi)`.
pub fn weighted_logistic_objective(q: &[f64], design: &Array2<f64>, beta: &[f64]) -> f64 {
    let p = design.ncols();
    let flat = design.as_slice().expect("standard layout");
    reduce::sum_by(q.len(), |i| {
        let row = &flat[i * p..(i + 1) * p];
        let eta: f64 = row.iter().zip(beta).map(|(x, b)| x * b).sum();
        let (_, lp, lq) = logistic_parts(eta);
        q[i] * lp + (1.0 - q[i]) * lq
    })
}

/// `(pi, log pi, log(1 - pi))` at `eta` from a single exponential.
#[inline]
fn logistic_parts(eta: f64) -> (f64, f64, f64) {
    let e = (-eta.abs()).exp();
    let l = e.ln_1p();
    if eta >= 0.0 {
        (1.0 / (1.0 + e), -l, -eta - l)
    } else {
        (e / (1.0 + e), eta - l, -l)
    }
}

/// Objective, gradient and negative Hessian (packed lower triangle).
fn newton_terms(q: &[f64], design: &Array2<f64>, beta: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let p = design.ncols();
    let packed = p * (p + 1) / 2;
    let flat = design.as_slice().expect("standard layout");
    let acc = reduce::sum_vec_by(q.len(), 1 + p + packed, |i, acc| {
        let row = &flat[i * p..(i + 1) * p];
        let eta: f64 = row.iter().zip(beta).map(|(x, b)| x * b).sum();
        let (pi, lp, lq) = logistic_parts(eta);
        acc[0] += q[i] * lp + (1.0 - q[i]) * lq;
        let r = q[i] - pi;
        let w = pi * (1.0 - pi);
        let (grad, hess) = acc[1..].split_at_mut(p);
        let mut idx = 0;
        for a in 0..p {
            grad[a] += r * row[a];
            let wa = w * row[a];
            for b in 0..=a {
                hess[idx] += wa * row[b];
                idx += 1;
            }
        }
    });
    let obj = acc[0];
    let grad = acc[1..1 + p].to_vec();
    let hess = acc[1 + p..].to_vec();
    (obj, grad, hess)
}

/// Solves `A x = b` for symmetric positive definite `A` (dense, row-major).
/// Returns `None` when a pivot is not safely positive.
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max).max(1e-300);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 1e-13 * scale) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * z[k];
        }
        z[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Some(x)
}

/// Newton direction on the free coordinates, with a ridge added when the
/// curvature matrix is numerically singular.
fn newton_direction(hess_packed: &[f64], grad: &[f64], free: &[usize]) -> Option<Vec<f64>> {
    let n = free.len();
    let at = |a: usize, b: usize| {
        let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
        hess_packed[hi * (hi + 1) / 2 + lo]
    };
    let mut mat = vec![0.0; n * n];
    for (r, &a) in free.iter().enumerate() {
        for (c, &b) in free.iter().enumerate() {
            mat[r * n + c] = at(a, b);
        }
    }
    let rhs: Vec<f64> = free.iter().map(|&a| grad[a]).collect();
    if let Some(x) = cholesky_solve(&mat, &rhs, n) {
        return Some(x);
    }
    let diag_max = (0..n).map(|i| mat[i * n + i]).fold(0.0, f64::max).max(1.0);
    let mut ridge = 1e-8 * diag_max;
    for _ in 0..8 {
        let mut reg = mat.clone();
        for i in 0..n {
            reg[i * n + i] += ridge;
        }
        if let Some(x) = cholesky_solve(&reg, &rhs, n) {
            log::debug!("M-step curvature singular; ridge {ridge:e} applied");
            return Some(x);
        }
        ridge *= 100.0;
    }
    None
}

/// Maximizes the weighted Bernoulli log-likelihood over the coefficient box
/// by projected Newton iterations with step halving, warm-started at `beta_init`.
pub fn m_step_beta(
    q: &[f64],
    design: &Array2<f64>,
    beta_init: &[f64],
    opts: &EmOptions,
) -> Result<BetaUpdate> {
    if q.len() != design.nrows() {
        return Err(Error::DimensionMismatch {
            expected: design.nrows(),
            got: q.len(),
        });
    }
    if beta_init.len() != design.ncols() {
        return Err(Error::DimensionMismatch {
            expected: design.ncols(),
            got: beta_init.len(),
        });
    }
    if q.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return invalid("posterior weights must lie in [0, 1]");
    }
    let design = if design.is_standard_layout() {
        std::borrow::Cow::Borrowed(design)
    } else {
        std::borrow::Cow::Owned(design.as_standard_layout().into_owned())
    };
    let bound = opts.bounds.beta_bound;
    let p = design.ncols();
    let mut beta: Vec<f64> = beta_init.iter().map(|&b| opts.bounds.clip_beta(b)).collect();

    let mut polished = false;
    let mut terms = newton_terms(q, &design, &beta);
    for iter in 0..opts.irls_max_iter {
        let (obj, grad, hess) = (terms.0, &terms.1, &terms.2);
        let free: Vec<usize> = (0..p)
            .filter(|&j| !((beta[j] >= bound && grad[j] > 0.0) || (beta[j] <= -bound && grad[j] < 0.0)))
            .collect();
        let gradient_norm = free.iter().map(|&j| grad[j] * grad[j]).sum::<f64>().sqrt();
        let done = free.is_empty() || gradient_norm <= opts.irls_tol;
        if done && (polished || free.is_empty()) {
            return Ok(BetaUpdate {
                beta,
                converged: true,
                iterations: iter,
                gradient_norm,
            });
        }
        let Some(direction) = newton_direction(hess, grad, &free) else {
            if done {
                polished = true;
                continue;
            }
            log::warn!("M-step Newton system could not be solved; keeping current coefficients");
            break;
        };

        // near the optimum the gain of a full Newton step is below rounding
        let slack = 1e-12 * (1.0 + obj.abs());
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial = beta.clone();
            for (&j, &dj) in free.iter().zip(&direction) {
                trial[j] = (beta[j] + step * dj).clamp(-bound, bound);
            }
            let trial_terms = newton_terms(q, &design, &trial);
            let value = trial_terms.0;
            if value >= obj || (step == 1.0 && value >= obj - slack) {
                accepted = Some((trial, trial_terms));
                break;
            }
            if done {
                break;
            }
            step *= 0.5;
        }
        if done {
            // one extra Newton step once the tolerance is met
            polished = true;
            if let Some((trial, t)) = accepted {
                beta = trial;
                terms = t;
            }
            continue;
        }
        match accepted {
            Some((trial, t)) => {
                beta = trial;
                terms = t;
            }
            // no ascent possible at working precision
            None => break,
        }
    }

    let grad = &terms.1;
    let gradient_norm = (0..p)
        .filter(|&j| !((beta[j] >= bound && grad[j] > 0.0) || (beta[j] <= -bound && grad[j] < 0.0)))
        .map(|j| grad[j] * grad[j])
        .sum::<f64>()
        .sqrt();
    Ok(BetaUpdate {
        converged: gradient_norm <= opts.irls_tol,
        beta,
        iterations: opts.irls_max_iter,
        gradient_norm,
    })
}

/// Closed-form maximizer of `A log(1 - gamma^k) + B k log(gamma)` clipped to
/// `[k_min, k_max]`, where `A` and `B` are the alternative weights above and
/// below `gamma`. Returns `None` when both weights vanish.
pub fn m_step_k(q: &[f64], y: &[bool], gamma: f64, bounds: &ParamBounds) -> Result<Option<f64>> {
    if q.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            got: q.len(),
        });
    }
    check_open_unit("gamma", gamma)?;
    let ab = reduce::sum_vec_by(q.len(), 2, |i, acc| {
        let w = 1.0 - q[i];
        if y[i] {
            acc[0] += w;
        } else {
            acc[1] += w;
        }
    });
    Ok(k_from_weights(ab[0], ab[1], gamma, bounds))
}

pub(crate) fn k_from_weights(above: f64, below: f64, gamma: f64, bounds: &ParamBounds) -> Option<f64> {
    if above <= 0.0 && below <= 0.0 {
        return None;
    }
    // gamma^k = B / (A + B); B = 0 sends k to +inf, A = 0 to 0.
    let k = (below / (above + below)).ln() / gamma.ln();
    Some(bounds.clip_k(k))
}

/// EM fit of the censored mixture. Holds `k` fixed when `opts.fixed_k` is set.
pub fn fit_em(
    table: &HypothesisTable,
    gamma: f64,
    init: &InitEstimate,
    opts: &EmOptions,
) -> Result<MixtureFit> {
    opts.validate()?;
    let censored = model::censor(table.pvalues(), gamma)?;
    let n_coef = table.d() + 1;
    if init.beta0.len() != n_coef {
        return Err(Error::DimensionMismatch {
            expected: n_coef,
            got: init.beta0.len(),
        });
    }
    let bounds = &opts.bounds;
    let beta: Vec<f64> = init.beta0.iter().map(|&b| bounds.clip_beta(b)).collect();
    let k = opts.fixed_k.unwrap_or_else(|| bounds.clip_k(init.k0));
    let design = table.design();
    let y = &censored.y;

    let eta = model::linear_predictor(design, &beta);
    let loglik = model::loglik_from_eta(&eta, y, gamma, k);
    if !loglik.is_finite() {
        return Err(Error::NonFiniteLikelihood { iteration: 0 });
    }
    let mut cur = EmState { beta, k, eta, loglik };
    let mut trace = vec![loglik];
    let mut converged = false;
    let mut iterations = 0;

    // one EM map evaluation
    let step = |from: &EmState, iteration: usize| -> Result<EmState> {
        let q = e_step_eta(&from.eta, y, &BernoulliTerms::new(gamma, from.k));
        let update = m_step_beta(&q, design, &from.beta, opts)?;
        if !update.converged {
            log::debug!(
                "EM iteration {iteration}: M-step stopped with gradient norm {:e}",
                update.gradient_norm
            );
        }
        let mut k = from.k;
        if opts.fixed_k.is_none() {
            if let Some(next) = m_step_k(&q, y, gamma, bounds)? {
                k = next;
            }
        }
        let eta = model::linear_predictor(design, &update.beta);
        let loglik = model::loglik_from_eta(&eta, y, gamma, k);
        if !loglik.is_finite() {
            return Err(Error::NonFiniteLikelihood { iteration });
        }
        Ok(EmState {
            beta: update.beta,
            k,
            eta,
            loglik,
        })
    };
    let small_change = |from: f64, to: f64| {
        let change = (to - from).abs();
        let rel = if from != 0.0 { change / from.abs() } else { change };
        rel < opts.tol
    };

    while iterations < opts.max_iterations {
        iterations += 1;
        let first = step(&cur, iterations)?;
        trace.push(first.loglik);
        let done = small_change(cur.loglik, first.loglik);
        if done || !opts.accelerate || iterations + 2 > opts.max_iterations {
            cur = first;
            if done {
                converged = true;
                break;
            }
            continue;
        }
        iterations += 1;
        let second = step(&first, iterations)?;
        trace.push(second.loglik);
        if small_change(first.loglik, second.loglik) {
            cur = second;
            converged = true;
            break;
        }

        // backtrack the extrapolation length until the jump itself is no worse
        let mut jump = None;
        let mut scale = 1.0;
        for _ in 0..6 {
            let Some((beta, k)) = extrapolate(&cur, &first, &second, scale, opts) else {
                break;
            };
            let eta = model::linear_predictor(design, &beta);
            let loglik = model::loglik_from_eta(&eta, y, gamma, k);
            if loglik.is_finite() && loglik >= second.loglik {
                jump = Some(EmState { beta, k, eta, loglik });
                break;
            }
            scale *= 0.5;
        }
        let mut next = second;
        if let Some(jump) = jump {
            iterations += 1;
            match step(&jump, iterations) {
                Ok(stable) if stable.loglik >= next.loglik => {
                    trace.push(stable.loglik);
                    let done = small_change(next.loglik, stable.loglik);
                    next = stable;
                    if done {
                        cur = next;
                        converged = true;
                        break;
                    }
                }
                _ => {}
            }
        }
        cur = next;
    }
    if !converged {
        log::warn!("EM stopped after {iterations} iterations without meeting tol = {}", opts.tol);
    }
    let EmState { beta, k, eta, .. } = cur;

    let pi_tilde: Vec<f64> = eta.iter().map(|&e| logistic(e)).collect();
    let pi_hat = winsorize_pi(&pi_tilde, opts.winsor.eps1, opts.winsor.eps2)?;
    Ok(MixtureFit {
        params: MixtureParams { beta, k },
        gamma,
        linear_predictor: eta,
        pi_tilde,
        pi_hat,
        loglik_trace: trace,
        converged,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{simulate, SimulationConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;

    /// k-objective evaluated independently of the closed form.
    fn k_objective(above: f64, below: f64, gamma: f64, k: f64) -> f64 {
        above * (1.0 - gamma.powf(k)).ln() + below * k * gamma.ln()
    }

    fn grid_argmax_k(above: f64, below: f64, gamma: f64, bounds: &ParamBounds) -> f64 {
        let n = ((bounds.k_max - bounds.k_min) / 1e-4).round() as usize;
        let mut best = (f64::NEG_INFINITY, bounds.k_min);
        for i in 0..=n {
            let k = bounds.k_min + i as f64 * 1e-4;
            let v = k_objective(above, below, gamma, k);
            if v > best.0 {
                best = (v, k);
            }
        }
        best.1
    }

    #[test]
    fn storey_plugin_arithmetic() {
        let p = [0.1, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8, 0.9];
        assert_eq!(storey_plugin(&p, 0.5), 1.0);
        assert_abs_diff_eq!(storey_plugin(&p, 0.75), 2.0 / (8.0 * 0.25), epsilon = 1e-15);
    }

    #[test]
    fn storey_singleton_grid() {
        let p = [0.01, 0.2, 0.6, 0.9];
        let est = storey_pi0_and_gamma(&p, &[0.5], 10, 3).unwrap();
        assert_eq!(est.gamma, 0.5);
        assert_eq!(est.pi_s, storey_plugin(&p, 0.5));
    }

    #[test]
    fn storey_uniform_pvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        for seed in [1, 2, 3] {
            let est = storey_pi0_and_gamma(&p, &default_lambda_grid(), 100, seed).unwrap();
            assert!(est.pi_s >= 0.9 && est.pi_s <= 1.0, "pi_s = {}", est.pi_s);
            assert!(default_lambda_grid().contains(&est.gamma));
        }
    }

    #[test]
    fn storey_rejects_bad_input() {
        assert!(storey_pi0_and_gamma(&[], &[0.5], 10, 0).is_err());
        assert!(storey_pi0_and_gamma(&[0.5], &[0.6, 0.5], 10, 0).is_err());
        assert!(storey_pi0_and_gamma(&[0.5], &[1.0], 10, 0).is_err());
    }

    #[test]
    fn storey_is_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f64> = (0..2000).map(|_| rng.random::<f64>().powf(2.0)).collect();
        let a = storey_pi0_and_gamma(&p, &default_lambda_grid(), 100, 9).unwrap();
        let b = storey_pi0_and_gamma(&p, &default_lambda_grid(), 100, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn neutral_initializer_when_nothing_below_u() {
        // all p-values tie, so none is strictly below the cutoff
        let p = vec![0.3; 50];
        let init = init_small_p(&p, 0.5, 3, &ParamBounds::default()).unwrap();
        assert!(init.neutral);
        assert_eq!(init.beta0, vec![0.0; 3]);
        assert_eq!(init.k0, 0.5);
        assert_eq!(init.n_small, 0);
    }

    #[test]
    fn initializer_recovers_mixture() {
        let (pi_true, k_true) = (0.8, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let p: Vec<f64> = (0..50_000)
            .map(|_| {
                let v: f64 = rng.random();
                if rng.random::<f64>() < pi_true {
                    v
                } else {
                    v.powf(1.0 / k_true)
                }
            })
            .collect();
        let u = 0.05;
        let (pi, k, n) = fit_small_p_mixture(&p, u).unwrap();

        // exhaustive fine grid on an independent transcription of the objective
        let small: Vec<f64> = p.iter().copied().filter(|&v| v < u).collect();
        assert_eq!(n, small.len());
        let direct = |pi: f64, k: f64| -> f64 {
            let s: f64 = small
                .iter()
                .map(|&v| (pi + (1.0 - pi) * k * v.powf(k - 1.0)).ln())
                .sum();
            s - small.len() as f64 * (pi * u + (1.0 - pi) * u.powf(k)).ln()
        };
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for i in 1..200 {
            for j in 1..200 {
                let (a, b) = (i as f64 / 200.0, j as f64 / 200.0);
                let v = direct(a, b);
                if v > best.0 {
                    best = (v, a, b);
                }
            }
        }
        assert!(direct(pi, k) >= best.0 - 1e-6, "optimizer below grid optimum");
        assert!((pi - best.1).abs() <= 0.01 && (k - best.2).abs() <= 0.01);
        assert!((pi - pi_true).abs() <= 0.1, "pi = {pi}");
        assert!((k - k_true).abs() <= 0.1, "k = {k}");
    }

    #[test]
    fn initializer_handles_k_near_one_boundary() {
        let u = 0.1;
        let p = [u / 2.0, 0.5, 0.7, 0.9];
        let obj_a = small_p_objective(&[(u / 2.0f64).ln()], u, 0.3, 1.0 - 1e-12);
        let obj_b = small_p_objective(&[(u / 2.0f64).ln()], u, 0.9, 1.0 - 1e-12);
        assert_abs_diff_eq!(obj_a, -u.ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(obj_b, -u.ln(), epsilon = 1e-9);
        let (pi, k, n) = fit_small_p_mixture(&p, u).unwrap();
        assert_eq!(n, 1);
        assert!(pi > 0.0 && pi < 1.0 && k > 0.0 && k < 1.0);
        let init = init_small_p(&p, 0.75, 2, &ParamBounds::default()).unwrap();
        assert!(init.k0 >= 0.001 && init.k0 <= 0.999);
    }

    #[test]
    fn initializer_complete_null_fallback() {
        let p: Vec<f64> = (1..=1000).map(|i| i as f64 / 1001.0).collect();
        let u = small_p_cutoff(&p, 1.0);
        assert_eq!(u, 10.0 / 1001.0);
    }

    #[test]
    fn e_step_examples() {
        let t = HypothesisTable::intercept_only(vec![0.7, 0.2]).unwrap();
        let c = model::censor(t.pvalues(), 0.5).unwrap();
        let q = e_step(&t, &c, &MixtureParams { beta: vec![0.0], k: 0.5 }).unwrap();
        assert_abs_diff_eq!(q[0], 0.630602, epsilon = 1e-6);
        assert_abs_diff_eq!(q[1], 0.414214, epsilon = 1e-6);
        let q = e_step(&t, &c, &MixtureParams { beta: vec![40.0], k: 0.5 }).unwrap();
        assert!(q.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn m_step_beta_examples() {
        let opts = EmOptions::default();
        let design = Array2::<f64>::ones((10, 1));
        let r = m_step_beta(&[0.5; 10], &design, &[1.0], &opts).unwrap();
        assert_abs_diff_eq!(r.beta[0], 0.0, epsilon = 1e-10);
        let r = m_step_beta(&[0.83; 10], &design, &[0.0], &opts).unwrap();
        assert_abs_diff_eq!(r.beta[0], (0.83f64 / 0.17).ln(), epsilon = 1e-10);
        assert!(r.converged);

        // separable: Q = 1 for x > 0 and 0 for x < 0
        let xs = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
        let mut design = Array2::<f64>::ones((6, 2));
        for (i, &x) in xs.iter().enumerate() {
            design[[i, 1]] = x;
        }
        let q: Vec<f64> = xs.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
        let r = m_step_beta(&q, &design, &[0.0, 0.0], &opts).unwrap();
        assert_eq!(r.beta[1], opts.bounds.beta_bound);
        assert_abs_diff_eq!(r.beta[0], 0.0, epsilon = 1e-8);
    }

    #[test]
    fn m_step_beta_collinear_design_uses_ridge() {
        let mut design = Array2::<f64>::ones((20, 2));
        design.column_mut(1).fill(3.0);
        let q: Vec<f64> = (0..20).map(|i| if i % 4 == 0 { 0.1 } else { 0.9 }).collect();
        let r = m_step_beta(&q, &design, &[0.0, 0.0], &EmOptions::default()).unwrap();
        let eta = r.beta[0] + 3.0 * r.beta[1];
        let qbar = q.iter().sum::<f64>() / 20.0;
        assert_abs_diff_eq!(logistic(eta), qbar, epsilon = 1e-8);
    }

    #[test]
    fn m_step_k_examples() {
        let b = ParamBounds::default();
        assert_abs_diff_eq!(
            k_from_weights(1.0, 1.5, 0.5, &b).unwrap(),
            0.6f64.ln() / 0.5f64.ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(k_from_weights(1.0, 1.5, 0.5, &b).unwrap(), 0.736966, epsilon = 1e-6);
        assert_eq!(k_from_weights(3.0, 1.0, 0.5, &b), Some(b.k_max));
        assert_eq!(k_from_weights(2.0, 0.0, 0.5, &b), Some(b.k_max));
        assert_eq!(k_from_weights(0.0, 2.0, 0.5, &b), Some(b.k_min));
        assert_eq!(k_from_weights(0.0, 0.0, 0.5, &b), None);
        // all Q = 1 leaves no alternative weight
        assert_eq!(m_step_k(&[1.0, 1.0], &[true, false], 0.5, &b).unwrap(), None);
        // grid oracle agrees on the worked instance and on the clipped ones
        for (a, bb) in [(1.0, 1.5), (3.0, 1.0), (0.0, 2.0), (2.0, 0.0)] {
            let closed = k_from_weights(a, bb, 0.5, &b).unwrap();
            assert!((closed - grid_argmax_k(a, bb, 0.5, &b)).abs() <= 2e-4);
        }
    }

    #[test]
    fn k_update_matches_grid_on_random_instances() {
        let b = ParamBounds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..25 {
            let m = rng.random_range(5..60);
            let gamma: f64 = rng.random_range(0.05..0.95);
            let q: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            let y: Vec<bool> = (0..m).map(|_| rng.random::<f64>() < 0.4).collect();
            let k = m_step_k(&q, &y, gamma, &b).unwrap().unwrap();
            let above: f64 = q.iter().zip(&y).filter(|(_, &y)| y).map(|(q, _)| 1.0 - q).sum();
            let below: f64 = q.iter().zip(&y).filter(|(_, &y)| !y).map(|(q, _)| 1.0 - q).sum();
            assert!((k - grid_argmax_k(above, below, gamma, &b)).abs() <= 2e-4);
        }
    }

    fn stationary_intercept_fixture() -> (HypothesisTable, f64, f64, f64) {
        // 45 of 100 censored above gamma; solve for the fixed-k intercept MLE
        let p: Vec<f64> = (0..100).map(|i| if i < 45 { 0.8 } else { 0.1 }).collect();
        let (gamma, k) = (0.5f64, 0.5f64);
        let ybar = 0.45;
        let gk = gamma.powf(k);
        let pi = (ybar - (1.0 - gk)) / (gk - gamma);
        (HypothesisTable::intercept_only(p).unwrap(), gamma, k, pi)
    }

    #[test]
    fn fit_em_at_fixed_point_stops_immediately() {
        let (table, gamma, k, pi) = stationary_intercept_fixture();
        let beta = (pi / (1.0 - pi)).ln();
        let init = InitEstimate {
            beta0: vec![beta],
            k0: k,
            u: 0.1,
            n_small: 1,
            pi_s: 0.9,
            pi_tilde: pi,
            neutral: false,
        };
        let opts = EmOptions {
            fixed_k: Some(k),
            ..EmOptions::default()
        };
        let fit = fit_em(&table, gamma, &init, &opts).unwrap();
        assert!(fit.loglik_trace.len() <= 2);
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.params.beta[0], beta, epsilon = 1e-10);
        assert_eq!(fit.params.k, k);
    }

    #[test]
    fn fit_em_rejects_wrong_init_length() {
        let (table, gamma, _, _) = stationary_intercept_fixture();
        let init = InitEstimate::neutral(3, 0.1, 1.0);
        assert!(matches!(
            fit_em(&table, gamma, &init, &EmOptions::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn fit_em_non_informative_covariate() {
        let config = SimulationConfig {
            m: 20_000,
            eta0: 2.5,
            k_d: 0.0,
            k_s: 2.4,
            seed: 31,
            ..SimulationConfig::default()
        };
        let study = simulate(&config).unwrap();
        let p = study.table.pvalues();
        let st = storey_pi0_and_gamma(p, &default_lambda_grid(), 100, 1).unwrap();
        let init = init_small_p(p, st.pi_s, 2, &ParamBounds::default()).unwrap();
        let fit = fit_em(&study.table, st.gamma, &init, &EmOptions::default()).unwrap();
        assert!(fit.params.beta[1].abs() <= 0.1, "slope = {}", fit.params.beta[1]);
        assert!(fit.loglik_trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    }

    #[test]
    fn accelerated_em_is_monotone_and_reaches_the_plain_fixed_point() {
        let study = simulate(&SimulationConfig {
            m: 2000,
            k_d: 1.0,
            seed: 12,
            ..SimulationConfig::default()
        })
        .unwrap();
        let init = init_small_p(study.table.pvalues(), 0.8, 2, &ParamBounds::default()).unwrap();
        let plain = EmOptions {
            max_iterations: 5000,
            tol: 1e-12,
            ..EmOptions::default()
        };
        let fast = EmOptions {
            accelerate: true,
            ..plain.clone()
        };
        let a = fit_em(&study.table, 0.5, &init, &plain).unwrap();
        let b = fit_em(&study.table, 0.5, &init, &fast).unwrap();
        assert!(b.loglik_trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        assert!(b.iterations <= a.iterations);
        let (la, lb) = (a.loglik_trace.last().unwrap(), b.loglik_trace.last().unwrap());
        assert!((la - lb).abs() <= 1e-6 * la.abs(), "{la} vs {lb}");
    }

    #[test]
    fn fit_em_is_permutation_equivariant() {
        let config = SimulationConfig {
            m: 3000,
            k_d: 1.0,
            seed: 8,
            ..SimulationConfig::default()
        };
        let study = simulate(&config).unwrap();
        let m = study.table.m();
        let order: Vec<usize> = (0..m).map(|i| (i * 7919 + 13) % m).collect();
        let permuted = study.table.permuted(&order).unwrap();
        let init = init_small_p(study.table.pvalues(), 0.9, 2, &ParamBounds::default()).unwrap();
        let a = fit_em(&study.table, 0.5, &init, &EmOptions::default()).unwrap();
        let b = fit_em(&permuted, 0.5, &init, &EmOptions::default()).unwrap();
        for (x, y) in a.params.beta.iter().zip(&b.params.beta) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
        assert_abs_diff_eq!(a.params.k, b.params.k, epsilon = 1e-10);
        for (r, &i) in order.iter().enumerate() {
            assert_abs_diff_eq!(b.pi_hat[r], a.pi_hat[i], epsilon = 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn em_ascent_on_random_data(
            seed in 0u64..10_000,
            m in 20usize..400,
            gamma in 0.1f64..0.9,
            d in 0usize..3,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p: Vec<f64> = (0..m).map(|_| rng.random::<f64>().powf(rng.random_range(0.5..3.0))).collect();
            let cov = Array2::from_shape_fn((m, d), |_| rng.random_range(-2.0..2.0));
            let table = HypothesisTable::new(model::default_ids(m), p, &cov).unwrap();
            let init = InitEstimate {
                beta0: (0..=d).map(|_| rng.random_range(-3.0..3.0)).collect(),
                k0: rng.random_range(0.05..0.95),
                ..InitEstimate::neutral(d + 1, 0.1, 1.0)
            };
            let fit = fit_em(&table, gamma, &init, &EmOptions::default()).unwrap();
            for w in fit.loglik_trace.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
            }
        }

        #[test]
        fn local_fdr_identity(eta in -10.0f64..10.0, gamma in 0.01f64..0.99, k in 0.01f64..0.99, y: bool) {
            let q = e_step_eta(&[eta], &[y], &BernoulliTerms::new(gamma, k))[0];
            let (b0, b1) = mixture_bernoulli_terms_ref(y, gamma, k);
            let pi = 1.0 / (1.0 + (-eta).exp());
            let ratio = (1.0 - pi) * b1 / (pi * b0);
            prop_assert!((q - 1.0 / (ratio + 1.0)).abs() <= 1e-12);
        }

        #[test]
        fn m_step_beta_interior_gradient(seed in 0u64..5000, m in 10usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let design = Array2::from_shape_fn((m, 2), |(_, j)| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
            let q: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..0.95)).collect();
            let opts = EmOptions::default();
            let r = m_step_beta(&q, &design, &[0.0, 0.0], &opts).unwrap();
            if r.beta.iter().all(|b| b.abs() < opts.bounds.beta_bound) {
                let (_, grad, _) = newton_terms(&q, &design, &r.beta);
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                prop_assert!(norm <= opts.irls_tol, "gradient norm {norm}");
            }
        }
    }

    fn mixture_bernoulli_terms_ref(y: bool, gamma: f64, k: f64) -> (f64, f64) {
        if y {
            (1.0 - gamma, 1.0 - gamma.powf(k))
        } else {
            (gamma, gamma.powf(k))
        }
    }
}
