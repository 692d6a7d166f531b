//! Replicated experiments, FWER/TPR summaries and stability diagnostics.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{bonferroni, holm, oracle_reject, weighted_bonferroni};
use crate::decision::{decide, DecisionParams};
use crate::error::{invalid, Error, Result};
use crate::estimation::{fit_em, init_small_p, InitEstimate};
use crate::pipeline::fit_em_multi_start;
use crate::model::{check_open_unit, HypothesisTable};
use crate::pipeline::{choose_gamma, fit_pipeline, GammaChoice, PipelineOptions};
use crate::simulation::{replicate_seed, simulate, SimulationConfig};

/// Multiple-testing procedures compared in experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The covariate-adaptive procedure.
    Camt,
    /// `p_i < alpha / (m pi_i)` with `pi_i` from the covariate-adaptive fit.
    WeightedBonferroni,
    Holm,
    Bonferroni,
    /// Optimal rule with the generating prior and alternative.
    Oracle,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Camt,
        Method::WeightedBonferroni,
        Method::Holm,
        Method::Bonferroni,
        Method::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Camt => "camt",
            Method::WeightedBonferroni => "weighted_bonferroni",
            Method::Holm => "holm",
            Method::Bonferroni => "bonferroni",
            Method::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let alias = match s.as_str() {
            "wbonf" | "weighted-bonferroni" => "weighted_bonferroni",
            "bonf" => "bonferroni",
            other => other,
        };
        Method::ALL
            .into_iter()
            .find(|m| m.name() == alias)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method '{s}'")))
    }
}

/// Outcome counts for one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicateScore {
    /// False rejections.
    pub v: usize,
    /// True rejections.
    pub s: usize,
    /// Non-rejected nulls.
    pub u: usize,
    /// Non-rejected alternatives.
    pub t: usize,
}

impl ReplicateScore {
    pub fn any_false(&self) -> bool {
        self.v >= 1
    }

    pub fn rejections(&self) -> usize {
        self.v + self.s
    }

    pub fn m1(&self) -> usize {
        self.s + self.t
    }

    /// `S / m1`, zero when there are no alternatives.
    pub fn tpr(&self) -> f64 {
        if self.m1() == 0 {
            0.0
        } else {
            self.s as f64 / self.m1() as f64
        }
    }
}

/// Counts `V`, `S`, `U`, `T` for a rejection set against the truth
/// (`true` = alternative).
pub fn score_replicate(rejected: &[bool], truth: &[bool]) -> Result<ReplicateScore> {
    if rejected.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: rejected.len(),
        });
    }
    let mut score = ReplicateScore { v: 0, s: 0, u: 0, t: 0 };
    for (&r, &h) in rejected.iter().zip(truth) {
        match (r, h) {
            (true, false) => score.v += 1,
            (true, true) => score.s += 1,
            (false, false) => score.u += 1,
            (false, true) => score.t += 1,
        }
    }
    Ok(score)
}

const Z_975: f64 = 1.959_963_984_540_054;

/// 95% Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = Z_975 * Z_975;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z_975 / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    // the interval contains p exactly; guard against rounding at p = 0 or 1
    ((center - half).clamp(0.0, p), (center + half).clamp(p, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub method: Method,
    pub alpha: f64,
    /// Replicates that produced a decision for this method.
    pub n_rep: usize,
    pub n_failed: usize,
    pub fwer_hat: f64,
    pub fwer_ci: (f64, f64),
    pub tpr_hat: f64,
    pub tpr_se: f64,
    pub mean_rejections: f64,
}

impl EvaluationSummary {
    pub fn from_scores(method: Method, alpha: f64, scores: &[ReplicateScore], n_failed: usize) -> Self {
        let n = scores.len();
        let false_hits = scores.iter().filter(|s| s.any_false()).count();
        let tprs: Vec<f64> = scores.iter().map(|s| s.tpr()).collect();
        let nf = n.max(1) as f64;
        let tpr_hat = tprs.iter().sum::<f64>() / nf;
        let tpr_se = if n > 1 {
            let var = tprs.iter().map(|t| (t - tpr_hat).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            method,
            alpha,
            n_rep: n,
            n_failed,
            fwer_hat: if n == 0 { 0.0 } else { false_hits as f64 / n as f64 },
            fwer_ci: wilson_interval(false_hits, n),
            tpr_hat,
            tpr_se,
            mean_rejections: scores.iter().map(|s| s.rejections() as f64).sum::<f64>() / nf,
        }
    }
}

pub type ReplicateOutcome = Vec<std::result::Result<ReplicateScore, String>>;

fn run_replicate(
    config: &SimulationConfig,
    methods: &[Method],
    alpha_grid: &[f64],
    pipeline: &PipelineOptions,
    sim_seed: u64,
) -> Result<ReplicateOutcome> {
    let study = simulate(&SimulationConfig {
        seed: sim_seed,
        ..config.clone()
    })?;
    let p = study.table.pvalues();
    let needs_fit = methods
        .iter()
        .any(|m| matches!(m, Method::Camt | Method::WeightedBonferroni));
    let fitted = if needs_fit {
        let opts = PipelineOptions {
            seed: replicate_seed(sim_seed, u64::MAX),
            ..pipeline.clone()
        };
        Some(fit_pipeline(&study.table, &opts).map_err(|e| e.to_string()))
    } else {
        None
    };

    let mut out = Vec::with_capacity(methods.len() * alpha_grid.len());
    for &method in methods {
        for &alpha in alpha_grid {
            let rejected: std::result::Result<Vec<bool>, String> = match method {
                Method::Bonferroni => Ok(bonferroni(p, alpha)),
                Method::Holm => Ok(holm(p, alpha)),
                Method::Camt => fitted.as_ref().expect("fit requested").clone().and_then(|f| {
                    let params = DecisionParams {
                        alpha,
                        ..pipeline.decision
                    };
                    decide(&study.table, &f.fit, &params)
                        .map(|d| d.rejected)
                        .map_err(|e| e.to_string())
                }),
                Method::WeightedBonferroni => {
                    fitted.as_ref().expect("fit requested").clone().and_then(|f| {
                        weighted_bonferroni(p, &f.fit.pi_hat, alpha).map_err(|e| e.to_string())
                    })
                }
                Method::Oracle => oracle_reject(p, &study.pi_true, &config.alternative_spec(), alpha)
                    .map(|d| d.rejected)
                    .map_err(|e| e.to_string()),
            };
            out.push(rejected.and_then(|r| score_replicate(&r, &study.truth).map_err(|e| e.to_string())));
        }
    }
    Ok(out)
}

/// Per-replicate outcomes of an experiment; `outcomes[r][slot]` holds the
/// score of replicate `r` for the method-major `slot`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRun {
    pub methods: Vec<Method>,
    pub alpha_grid: Vec<f64>,
    pub outcomes: Vec<ReplicateOutcome>,
}

impl ExperimentRun {
    fn slot(&self, method: Method, alpha: f64) -> Option<usize> {
        let mi = self.methods.iter().position(|&m| m == method)?;
        let ai = self.alpha_grid.iter().position(|&a| a == alpha)?;
        Some(mi * self.alpha_grid.len() + ai)
    }

    /// Scores of every replicate for one method and level; `None` marks a
    /// failed replicate.
    pub fn scores(&self, method: Method, alpha: f64) -> Option<Vec<Option<ReplicateScore>>> {
        let slot = self.slot(method, alpha)?;
        Some(self.outcomes.iter().map(|o| o[slot].as_ref().ok().copied()).collect())
    }

    /// One summary per `(method, alpha)` in method-major order.
    pub fn summaries(&self) -> Vec<EvaluationSummary> {
        let mut summaries = Vec::with_capacity(self.methods.len() * self.alpha_grid.len());
        for &method in &self.methods {
            for &alpha in &self.alpha_grid {
                let slot = self.slot(method, alpha).expect("registered");
                let mut scores = Vec::with_capacity(self.outcomes.len());
                let mut failed = 0;
                for (r, outcome) in self.outcomes.iter().enumerate() {
                    match &outcome[slot] {
                        Ok(s) => scores.push(*s),
                        Err(e) => {
                            failed += 1;
                            log::warn!("replicate {r}: {method} at alpha = {alpha} failed: {e}");
                        }
                    }
                }
                summaries.push(EvaluationSummary::from_scores(method, alpha, &scores, failed));
            }
        }
        summaries
    }
}

/// Runs `n_rep` replicates of `config`, applying every method at every level
/// to the same simulated data set. Replicate `r` is simulated with seed
/// `replicate_seed(seed, r)`.
pub fn run_replicates(
    config: &SimulationConfig,
    methods: &[Method],
    alpha_grid: &[f64],
    n_rep: usize,
    seed: u64,
    pipeline: &PipelineOptions,
) -> Result<ExperimentRun> {
    config.validate()?;
    if methods.is_empty() || alpha_grid.is_empty() {
        return invalid("need at least one method and one alpha level");
    }
    if n_rep == 0 {
        return invalid("need at least one replicate");
    }
    for &a in alpha_grid {
        check_open_unit("alpha", a)?;
    }
    let outcomes: Vec<ReplicateOutcome> = (0..n_rep as u64)
        .into_par_iter()
        .map(|r| run_replicate(config, methods, alpha_grid, pipeline, replicate_seed(seed, r)))
        .collect::<Result<_>>()?;
    Ok(ExperimentRun {
        methods: methods.to_vec(),
        alpha_grid: alpha_grid.to_vec(),
        outcomes,
    })
}

/// [`run_replicates`] aggregated into one summary per `(method, alpha)` in
/// method-major order.
pub fn run_experiment(
    config: &SimulationConfig,
    methods: &[Method],
    alpha_grid: &[f64],
    n_rep: usize,
    seed: u64,
    pipeline: &PipelineOptions,
) -> Result<Vec<EvaluationSummary>> {
    Ok(run_replicates(config, methods, alpha_grid, n_rep, seed, pipeline)?.summaries())
}

/// Settings for [`perturbation_diagnostic`].
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationOptions {
    pub pipeline: PipelineOptions,
    /// Reuse this initializer instead of recomputing it for each refit.
    pub fixed_init: Option<InitEstimate>,
}

/// Threshold of hypothesis `j` after the full procedure is rerun with
/// `p_j` replaced by `value`, at a fixed censoring level.
pub fn threshold_with_pvalue(
    table: &HypothesisTable,
    gamma: f64,
    j: usize,
    value: f64,
    opts: &PerturbationOptions,
) -> Result<f64> {
    let perturbed = table.with_pvalue_at(j, value)?;
    let pipeline = PipelineOptions {
        gamma: GammaChoice::Fixed(gamma),
        ..opts.pipeline.clone()
    };
    let fit = match &opts.fixed_init {
        Some(init) => fit_em(&perturbed, gamma, init, &pipeline.em)?,
        None => {
            let (_, pi_s, _) = choose_gamma(perturbed.pvalues(), &pipeline)?;
            let init = init_small_p(perturbed.pvalues(), pi_s, perturbed.d() + 1, &pipeline.em.bounds)?;
            fit_em_multi_start(&perturbed, gamma, &init, &pipeline.em, pipeline.multi_start)?
        }
    };
    if !fit.converged {
        return Err(Error::InvalidArgument(format!(
            "EM did not converge on the copy with p[{j}] = {value}"
        )));
    }
    let decisions = decide(&perturbed, &fit, &pipeline.decision)?;
    Ok(decisions.thresholds[j])
}

/// `|t_j(p_j -> 0) - t_j(p_j -> 1)|` for each sampled `j`; `None` marks a
/// refit that failed or did not converge.
pub fn perturbation_diagnostic(
    table: &HypothesisTable,
    gamma: f64,
    opts: &PerturbationOptions,
    j_sample: &[usize],
) -> Result<Vec<Option<f64>>> {
    check_open_unit("gamma", gamma)?;
    if let Some(&j) = j_sample.iter().find(|&&j| j >= table.m()) {
        return invalid(format!("index {j} out of range for m = {}", table.m()));
    }
    Ok(j_sample
        .par_iter()
        .map(|&j| {
            let low = threshold_with_pvalue(table, gamma, j, 0.0, opts);
            let high = threshold_with_pvalue(table, gamma, j, 1.0, opts);
            match (low, high) {
                (Ok(a), Ok(b)) => Some((a - b).abs()),
                (a, b) => {
                    if let Err(e) = a.and(b) {
                        log::warn!("perturbation of hypothesis {j} failed: {e}");
                    }
                    None
                }
            }
        })
        .collect())
}

/// Curvature factor of the censored likelihood at `beta = 0`:
///
/// `u = [2 a b - (g - g^k)(g + g^k - 1)] / (a^2 b^2)` with
/// `a = 1 - g + (g - g^k)/2`, `b = g - (g - g^k)/2`.
pub fn u_gamma_k(gamma: f64, k: f64) -> f64 {
    let gk = gamma.powf(k);
    let diff = gamma - gk;
    let a = 1.0 - gamma + diff / 2.0;
    let b = gamma - diff / 2.0;
    (2.0 * a * b - diff * (gamma + gk - 1.0)) / (a * a * b * b)
}

/// Minimum of `u(gamma, k)` over the grid `k = 0, step, ..., 1`; returns `(k, u)`.
pub fn u_min_over_k(gamma: f64, step: f64) -> (f64, f64) {
    let n = (1.0 / step).round() as usize;
    (0..=n)
        .map(|i| {
            let k = i as f64 / n as f64;
            (k, u_gamma_k(gamma, k))
        })
        .fold((f64::NAN, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}
