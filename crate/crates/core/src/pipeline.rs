//! End-to-end procedure: censoring level, initializer, EM fit, decisions.

use serde::{Deserialize, Serialize};

use crate::decision::{decide, DecisionParams, DecisionSet};
use crate::error::{invalid, Result};
use crate::estimation::{
    default_lambda_grid, fit_em, init_small_p, storey_pi0_and_gamma, storey_plugin, EmOptions,
    InitEstimate, StoreyEstimate,
};
use crate::model::{HypothesisTable, MixtureFit, ParamBounds};

/// How the censoring level is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum GammaChoice {
    /// Storey's bootstrap over the lambda grid.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub gamma: GammaChoice,
    pub lambda_grid: Vec<f64>,
    pub n_boot: usize,
    /// Seed of the bootstrap used for automatic gamma selection.
    pub seed: u64,
    pub em: EmOptions,
    pub decision: DecisionParams,
    /// Also run EM from the Storey-intercept and neutral starts and keep the
    /// best fit by [`select_fit`].
    pub multi_start: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            gamma: GammaChoice::Auto,
            lambda_grid: default_lambda_grid(),
            n_boot: 100,
            seed: 0,
            em: EmOptions::default(),
            decision: DecisionParams::default(),
            multi_start: true,
        }
    }
}

/// Everything produced before thresholds are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineFit {
    pub storey: Option<StoreyEstimate>,
    pub pi_s: f64,
    pub gamma: f64,
    pub init: InitEstimate,
    pub fit: MixtureFit,
}

/// Selects `gamma` and the null-proportion estimate used by the initializer.
pub fn choose_gamma(pvalues: &[f64], opts: &PipelineOptions) -> Result<(f64, f64, Option<StoreyEstimate>)> {
    match opts.gamma {
        GammaChoice::Auto => {
            let est = storey_pi0_and_gamma(pvalues, &opts.lambda_grid, opts.n_boot, opts.seed)?;
            Ok((est.gamma, est.pi_s, Some(est)))
        }
        GammaChoice::Fixed(g) => {
            if !(g > 0.0 && g < 1.0) {
                return invalid(format!("gamma must lie in (0, 1), got {g}"));
            }
            Ok((g, storey_plugin(pvalues, g), None))
        }
    }
}

/// Extra EM starts: intercept `logit(pi_s)` with the initializer's `k`, and
/// the neutral start `beta = 0`, `k = 0.5`.
pub fn alternative_starts(init: &InitEstimate, bounds: &ParamBounds) -> Vec<InitEstimate> {
    let n_coef = init.beta0.len();
    let pi_s = init.pi_s.min(1.0 - 1e-12);
    let mut storey = InitEstimate {
        k0: init.k0,
        ..init.clone()
    };
    storey.beta0 = vec![0.0; n_coef];
    storey.beta0[0] = bounds.clip_beta((pi_s / (1.0 - pi_s)).ln());
    let neutral = InitEstimate {
        beta0: vec![0.0; n_coef],
        k0: bounds.clip_k(0.5),
        ..init.clone()
    };
    vec![storey, neutral]
}

/// EM fits from `init` and, when `multi_start` is set, from each distinct
/// [`alternative_starts`] entry. Failures of the alternative starts are
/// logged and skipped.
pub fn fit_em_starts(
    table: &HypothesisTable,
    gamma: f64,
    init: &InitEstimate,
    em: &EmOptions,
    multi_start: bool,
) -> Result<Vec<MixtureFit>> {
    let mut fits = vec![fit_em(table, gamma, init, em)?];
    if !multi_start {
        return Ok(fits);
    }
    for start in alternative_starts(init, &em.bounds) {
        if start.beta0 == init.beta0 && start.k0 == init.k0 {
            continue;
        }
        match fit_em(table, gamma, &start, em) {
            Ok(fit) => fits.push(fit),
            Err(e) => log::debug!("EM from an alternative start failed: {e}"),
        }
    }
    Ok(fits)
}

/// Index of the fit to keep: converged fits before unconverged ones, then the
/// highest final quasi log-likelihood, with earlier fits winning ties.
pub fn select_fit(fits: &[MixtureFit]) -> Option<usize> {
    let key = |f: &MixtureFit| (f.converged, f.loglik_trace.last().copied().unwrap_or(f64::NEG_INFINITY));
    let mut best: Option<usize> = None;
    for (i, fit) in fits.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let (ca, la) = key(fit);
                let (cb, lb) = key(&fits[b]);
                (ca && !cb) || (ca == cb && la > lb)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// [`fit_em_starts`] followed by [`select_fit`].
pub fn fit_em_multi_start(
    table: &HypothesisTable,
    gamma: f64,
    init: &InitEstimate,
    em: &EmOptions,
    multi_start: bool,
) -> Result<MixtureFit> {
    let mut fits = fit_em_starts(table, gamma, init, em, multi_start)?;
    let best = select_fit(&fits).expect("at least one fit");
    Ok(fits.swap_remove(best))
}

/// Fits the mixture, recomputing the initializer from the data.
pub fn fit_pipeline(table: &HypothesisTable, opts: &PipelineOptions) -> Result<PipelineFit> {
    let (gamma, pi_s, storey) = choose_gamma(table.pvalues(), opts)?;
    let init = init_small_p(table.pvalues(), pi_s, table.d() + 1, &opts.em.bounds)?;
    let fit = fit_em_multi_start(table, gamma, &init, &opts.em, opts.multi_start)?;
    Ok(PipelineFit {
        storey,
        pi_s,
        gamma,
        init,
        fit,
    })
}

/// Fit followed by decisions at `opts.decision`.
pub fn run_pipeline(table: &HypothesisTable, opts: &PipelineOptions) -> Result<(PipelineFit, DecisionSet)> {
    let fitted = fit_pipeline(table, opts)?;
    let decisions = decide(table, &fitted.fit, &opts.decision)?;
    Ok((fitted, decisions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{simulate, SimulationConfig};

    #[test]
    fn fixed_gamma_uses_plugin_estimate() {
        let study = simulate(&SimulationConfig {
            m: 2000,
            seed: 3,
            ..SimulationConfig::default()
        })
        .unwrap();
        let opts = PipelineOptions {
            gamma: GammaChoice::Fixed(0.4),
            ..PipelineOptions::default()
        };
        let fitted = fit_pipeline(&study.table, &opts).unwrap();
        assert_eq!(fitted.gamma, 0.4);
        assert!(fitted.storey.is_none());
        assert_eq!(fitted.pi_s, storey_plugin(study.table.pvalues(), 0.4));
        assert!(choose_gamma(study.table.pvalues(), &PipelineOptions {
            gamma: GammaChoice::Fixed(1.0),
            ..PipelineOptions::default()
        })
        .is_err());
    }

    #[test]
    fn multi_start_never_loses_a_converged_fit() {
        for seed in 0..4 {
            let study = simulate(&SimulationConfig {
                m: 2000,
                seed,
                ..SimulationConfig::default()
            })
            .unwrap();
            let single = PipelineOptions {
                multi_start: false,
                ..PipelineOptions::default()
            };
            let a = fit_pipeline(&study.table, &single).unwrap();
            let b = fit_pipeline(&study.table, &PipelineOptions::default()).unwrap();
            if a.fit.converged {
                assert!(b.fit.converged);
                assert!(b.fit.loglik_trace.last() >= a.fit.loglik_trace.last());
            }
            assert_eq!(a.init, b.init);
        }
    }

    fn fake_fit(converged: bool, last: f64) -> MixtureFit {
        MixtureFit {
            params: crate::model::MixtureParams { beta: vec![0.0], k: 0.5 },
            gamma: 0.5,
            linear_predictor: vec![0.0],
            pi_tilde: vec![0.5],
            pi_hat: vec![0.5],
            loglik_trace: vec![last - 1.0, last],
            converged,
            iterations: 1,
        }
    }

    #[test]
    fn selection_prefers_converged_then_likelihood() {
        assert_eq!(select_fit(&[]), None);
        let fits = [fake_fit(false, -1.0), fake_fit(true, -3.0), fake_fit(true, -2.0)];
        assert_eq!(select_fit(&fits), Some(2));
        let fits = [fake_fit(false, -1.0), fake_fit(false, -0.5)];
        assert_eq!(select_fit(&fits), Some(1));
        let fits = [fake_fit(true, -2.0), fake_fit(true, -2.0)];
        assert_eq!(select_fit(&fits), Some(0));
    }

    #[test]
    fn run_is_deterministic() {
        let study = simulate(&SimulationConfig {
            m: 3000,
            k_d: 1.5,
            seed: 21,
            ..SimulationConfig::default()
        })
        .unwrap();
        let opts = PipelineOptions::default();
        let a = run_pipeline(&study.table, &opts).unwrap();
        let b = run_pipeline(&study.table, &opts).unwrap();
        assert_eq!(a, b);
        assert!(a.1.budget(&study.table.pvalues().iter().map(|&p| p > a.0.gamma).collect::<Vec<_>>()) <= 0.05 + 1e-8);
    }
}
