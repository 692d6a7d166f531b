//! Synthetic studies: one Gaussian covariate, logistic prior, normal or
//! shifted-gamma alternatives and five noise correlation structures.
//!
//! Random draws for hypothesis `i` come from their own ChaCha stream keyed by
//! `(seed, i)`, and each block factor from a stream keyed by `(seed, block)`,
//! so generation order and thread count never change the output.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::baselines::AlternativeSpec;
use crate::error::{invalid, Error, Result};
use crate::model::{default_ids, logistic, HypothesisTable};

const BLOCK_STREAM: u64 = 1 << 62;

/// Alternative distribution of the z-scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlternativeKind {
    Normal,
    ShiftedGamma,
}

/// Noise correlation structure (unit marginal variance throughout).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Correlation {
    Independent,
    /// Equicorrelated blocks.
    Block { size: usize, rho: f64 },
    /// Blocks split in two halves: `+rho` within a half, `-rho` across.
    BlockSigned { size: usize, sub: usize, rho: f64 },
    Ar1 { phi: f64 },
}

impl Correlation {
    pub fn validate(&self, m: usize) -> Result<()> {
        match *self {
            Correlation::Independent => Ok(()),
            Correlation::Block { size, rho } => {
                check_block(size, m)?;
                check_rho(rho)
            }
            Correlation::BlockSigned { size, sub, rho } => {
                check_block(size, m)?;
                if sub == 0 || sub >= size {
                    return invalid(format!("sub-block size {sub} must lie in [1, {size})"));
                }
                check_rho(rho)
            }
            Correlation::Ar1 { phi } => {
                if phi.abs() < 1.0 {
                    Ok(())
                } else {
                    invalid(format!("AR(1) coefficient must satisfy |phi| < 1, got {phi}"))
                }
            }
        }
    }

    /// Target correlation between noise terms `i` and `j`.
    pub fn target(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 1.0;
        }
        match *self {
            Correlation::Independent => 0.0,
            Correlation::Block { size, rho } => {
                if i / size == j / size {
                    rho
                } else {
                    0.0
                }
            }
            Correlation::BlockSigned { size, sub, rho } => {
                if i / size != j / size {
                    0.0
                } else if (i % size < sub) == (j % size < sub) {
                    rho
                } else {
                    -rho
                }
            }
            Correlation::Ar1 { phi } => phi.powi(i.abs_diff(j) as i32),
        }
    }

    /// Label of the pair class `(i, j)` belongs to, for summaries.
    fn pair_class(&self, i: usize, j: usize) -> String {
        match *self {
            Correlation::Independent => "off-diagonal".into(),
            Correlation::Block { size, .. } => {
                if i / size == j / size {
                    "within block".into()
                } else {
                    "across blocks".into()
                }
            }
            Correlation::BlockSigned { size, sub, .. } => {
                if i / size != j / size {
                    "across blocks".into()
                } else if (i % size < sub) == (j % size < sub) {
                    "same sub-block".into()
                } else {
                    "opposite sub-blocks".into()
                }
            }
            Correlation::Ar1 { .. } => format!("lag {}", i.abs_diff(j)),
        }
    }
}

fn check_block(size: usize, m: usize) -> Result<()> {
    if size == 0 || !m.is_multiple_of(size) {
        return invalid(format!("block size {size} does not divide m = {m}"));
    }
    Ok(())
}

fn check_rho(rho: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rho) {
        Ok(())
    } else {
        invalid(format!("block correlation must lie in [0, 1], got {rho}"))
    }
}

/// Named simulation setups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setup {
    S0,
    S1,
    S2_1,
    S2_2,
    S2_3,
    S2_4,
}

impl Setup {
    pub const ALL: [Setup; 6] = [Setup::S0, Setup::S1, Setup::S2_1, Setup::S2_2, Setup::S2_3, Setup::S2_4];

    pub fn alternative(self) -> AlternativeKind {
        match self {
            Setup::S1 => AlternativeKind::ShiftedGamma,
            _ => AlternativeKind::Normal,
        }
    }

    pub fn correlation(self) -> Correlation {
        match self {
            Setup::S0 | Setup::S1 => Correlation::Independent,
            Setup::S2_1 => Correlation::Block { size: 20, rho: 0.5 },
            Setup::S2_2 => Correlation::BlockSigned {
                size: 20,
                sub: 10,
                rho: 0.5,
            },
            Setup::S2_3 => Correlation::Ar1 { phi: 0.75 },
            Setup::S2_4 => Correlation::Ar1 { phi: -0.75 },
        }
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Setup::S0 => "S0",
            Setup::S1 => "S1",
            Setup::S2_1 => "S2.1",
            Setup::S2_2 => "S2.2",
            Setup::S2_3 => "S2.3",
            Setup::S2_4 => "S2.4",
        };
        f.write_str(s)
    }
}

impl FromStr for Setup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Setup::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown setup '{s}'")))
    }
}

/// Baseline log-odds levels (sparse, medium, dense signals).
pub const ETA0_LEVELS: [f64; 3] = [3.5, 2.5, 1.5];
/// Covariate informativeness levels.
pub const KD_LEVELS: [f64; 3] = [0.0, 1.0, 1.5];

/// Six signal strengths equally spaced on `[2, 2.8]`.
pub fn signal_strength_grid() -> Vec<f64> {
    (0..6).map(|i| 2.0 + 0.8 * i as f64 / 5.0).collect()
}

/// One generative scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub m: usize,
    /// Baseline log-odds of being null.
    pub eta0: f64,
    /// Covariate effect on the log-odds.
    pub k_d: f64,
    /// Signal strength (mean of alternative z-scores).
    pub k_s: f64,
    pub alternative: AlternativeKind,
    pub correlation: Correlation,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            m: 10_000,
            eta0: 2.5,
            k_d: 1.0,
            k_s: 2.4,
            alternative: AlternativeKind::Normal,
            correlation: Correlation::Independent,
            seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn for_setup(setup: Setup) -> Self {
        Self {
            alternative: setup.alternative(),
            correlation: setup.correlation(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return invalid("m must be at least 1");
        }
        if !(self.eta0.is_finite() && self.k_d.is_finite() && self.k_s.is_finite()) {
            return invalid("simulation parameters must be finite");
        }
        if self.k_s < 0.0 {
            return invalid(format!("signal strength must be non-negative, got {}", self.k_s));
        }
        self.correlation.validate(self.m)
    }

    /// Every hypothesis null: `logistic(40)` rounds to 1, so no alternative
    /// is ever drawn.
    pub fn complete_null(m: usize) -> Self {
        Self {
            m,
            eta0: 40.0,
            k_d: 0.0,
            ..Self::default()
        }
    }

    /// True alternative density of the p-values.
    pub fn alternative_spec(&self) -> AlternativeSpec {
        match self.alternative {
            AlternativeKind::Normal => AlternativeSpec::NormalShift { shift: self.k_s },
            AlternativeKind::ShiftedGamma => AlternativeSpec::ShiftedGamma { shift: self.k_s },
        }
    }

    /// Copy with the seed for replicate `r`.
    pub fn replicate(&self, r: u64) -> Self {
        Self {
            seed: replicate_seed(self.seed, r),
            ..self.clone()
        }
    }
}

/// Decorrelated seed for sub-stream `index` (SplitMix64 finalizer).
pub fn replicate_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// A simulated study with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedStudy {
    pub table: HypothesisTable,
    /// `true` for hypotheses drawn from the alternative.
    pub truth: Vec<bool>,
    pub z: Vec<f64>,
    /// True prior null probabilities.
    pub pi_true: Vec<f64>,
}

impl SimulatedStudy {
    pub fn n_alternative(&self) -> usize {
        self.truth.iter().filter(|&&h| h).count()
    }
}

struct Draws {
    x: f64,
    u: f64,
    xi: f64,
    gamma: f64,
}

/// Noise vector with the configured correlation, from per-index streams.
fn correlated_noise(correlation: &Correlation, xi: &[f64], seed: u64) -> Vec<f64> {
    let m = xi.len();
    match *correlation {
        Correlation::Independent => xi.to_vec(),
        Correlation::Block { size, rho } | Correlation::BlockSigned { size, rho, .. } => {
            let factors: Vec<f64> = (0..m / size)
                .into_par_iter()
                .map(|b| stream(seed, BLOCK_STREAM | b as u64).sample(StandardNormal))
                .collect();
            let sub = match *correlation {
                Correlation::BlockSigned { sub, .. } => Some(sub),
                _ => None,
            };
            let (a, c) = (rho.sqrt(), (1.0 - rho).sqrt());
            (0..m)
                .map(|i| {
                    let sign = match sub {
                        Some(s) if i % size >= s => -1.0,
                        _ => 1.0,
                    };
                    sign * a * factors[i / size] + c * xi[i]
                })
                .collect()
        }
        Correlation::Ar1 { phi } => {
            let c = (1.0 - phi * phi).sqrt();
            let mut e = Vec::with_capacity(m);
            let mut prev = 0.0;
            for (i, &v) in xi.iter().enumerate() {
                prev = if i == 0 { v } else { phi * prev + c * v };
                e.push(prev);
            }
            e
        }
    }
}

/// Generates one study.
pub fn simulate(config: &SimulationConfig) -> Result<SimulatedStudy> {
    config.validate()?;
    let m = config.m;
    let seed = config.seed;
    let shape2 = Gamma::new(2.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid gamma parameters");
    let needs_gamma = config.alternative == AlternativeKind::ShiftedGamma;

    let draws: Vec<Draws> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            let x = rng.sample(StandardNormal);
            let u = rng.random::<f64>();
            let xi = rng.sample(StandardNormal);
            let gamma = if needs_gamma { shape2.sample(&mut rng) } else { 0.0 };
            Draws { x, u, xi, gamma }
        })
        .collect();

    let xi: Vec<f64> = draws.iter().map(|d| d.xi).collect();
    let noise = correlated_noise(&config.correlation, &xi, seed);
    drop(xi);

    let normal = Normal::standard();
    let location = config.k_s - std::f64::consts::SQRT_2;
    let mut covariate = Array2::<f64>::zeros((m, 1));
    let mut truth = Vec::with_capacity(m);
    let mut z = Vec::with_capacity(m);
    let mut pi_true = Vec::with_capacity(m);
    for (i, d) in draws.iter().enumerate() {
        let pi = logistic(config.eta0 + config.k_d * d.x);
        let alt = d.u < 1.0 - pi;
        let zi = match (alt, config.alternative) {
            (false, _) => noise[i],
            (true, AlternativeKind::Normal) => config.k_s + noise[i],
            (true, AlternativeKind::ShiftedGamma) => location + d.gamma,
        };
        covariate[[i, 0]] = d.x;
        truth.push(alt);
        z.push(zi);
        pi_true.push(pi);
    }
    drop(draws);
    let pvalues: Vec<f64> = z.par_iter().map(|&v| normal.sf(v)).collect();
    let table = HypothesisTable::new(default_ids(m), pvalues, &covariate)?;
    Ok(SimulatedStudy {
        table,
        truth,
        z,
        pi_true,
    })
}

/// Summary of one class of pairs sharing a target correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairClassSummary {
    pub label: String,
    pub target: f64,
    pub n_pairs: usize,
    pub mean_estimate: f64,
    /// Largest single-pair deviation from the target.
    pub max_pair_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub m: usize,
    pub n_rep: usize,
    pub classes: Vec<PairClassSummary>,
    /// `max |mean_estimate - target|` over pair classes.
    pub max_class_deviation: f64,
    /// `max |variance - 1|` over the diagonal.
    pub max_variance_deviation: f64,
    #[serde(skip)]
    pub estimated: Array2<f64>,
}

/// Monte-Carlo check of the noise correlation structure under the complete
/// null. Pairs are grouped by their structural class (within a block, lag,
/// ...) and each class's mean estimate is compared with its target.
pub fn empirical_correlation_check(config: &SimulationConfig, n_rep: usize) -> Result<CorrelationReport> {
    config.validate()?;
    let m = config.m;
    if m > 200 {
        return invalid(format!("correlation check is limited to m <= 200, got {m}"));
    }
    if n_rep < 2 {
        return invalid("need at least two replicates");
    }
    let samples: Vec<Vec<f64>> = (0..n_rep as u64)
        .into_par_iter()
        .map(|r| {
            let seed = replicate_seed(config.seed, r);
            let xi: Vec<f64> = (0..m)
                .map(|i| stream(seed, i as u64).sample(StandardNormal))
                .collect();
            correlated_noise(&config.correlation, &xi, seed)
        })
        .collect();

    let n = n_rep as f64;
    let mut mean = vec![0.0; m];
    for s in &samples {
        for (a, v) in mean.iter_mut().zip(s) {
            *a += v / n;
        }
    }
    let mut cov = Array2::<f64>::zeros((m, m));
    for s in &samples {
        for i in 0..m {
            let di = s[i] - mean[i];
            for j in i..m {
                cov[[i, j]] += di * (s[j] - mean[j]);
            }
        }
    }
    cov.mapv_inplace(|v| v / (n - 1.0));
    let mut corr = Array2::<f64>::eye(m);
    for i in 0..m {
        for j in i + 1..m {
            let c = cov[[i, j]] / (cov[[i, i]] * cov[[j, j]]).sqrt();
            corr[[i, j]] = c;
            corr[[j, i]] = c;
        }
    }
    let max_variance_deviation = (0..m).map(|i| (cov[[i, i]] - 1.0).abs()).fold(0.0, f64::max);

    let mut classes: Vec<PairClassSummary> = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            let label = config.correlation.pair_class(i, j);
            let target = config.correlation.target(i, j);
            let est = corr[[i, j]];
            let entry = match classes.iter_mut().find(|c| c.label == label) {
                Some(c) => c,
                None => {
                    classes.push(PairClassSummary {
                        label,
                        target,
                        n_pairs: 0,
                        mean_estimate: 0.0,
                        max_pair_deviation: 0.0,
                    });
                    classes.last_mut().unwrap()
                }
            };
            entry.n_pairs += 1;
            entry.mean_estimate += est;
            entry.max_pair_deviation = entry.max_pair_deviation.max((est - target).abs());
        }
    }
    for c in classes.iter_mut() {
        c.mean_estimate /= c.n_pairs as f64;
    }
    let max_class_deviation = classes
        .iter()
        .map(|c| (c.mean_estimate - c.target).abs())
        .fold(0.0, f64::max);
    Ok(CorrelationReport {
        m,
        n_rep,
        classes,
        max_class_deviation,
        max_variance_deviation,
        estimated: corr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn complete_null_has_no_alternatives() {
        let study = simulate(&SimulationConfig::complete_null(20_000)).unwrap();
        assert_eq!(study.n_alternative(), 0);
        assert!(study.pi_true.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn signal_grid_endpoints() {
        let g = signal_strength_grid();
        assert_eq!(g.len(), 6);
        assert_eq!(g[0], 2.0);
        assert_abs_diff_eq!(g[5], 2.8, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1] - g[0], 0.16, epsilon = 1e-12);
    }

    #[test]
    fn setup_names_round_trip() {
        for s in Setup::ALL {
            assert_eq!(s.to_string().parse::<Setup>().unwrap(), s);
        }
        assert!("S3".parse::<Setup>().is_err());
    }

    #[test]
    fn reproducible_and_consistent() {
        let config = SimulationConfig {
            m: 400,
            correlation: Correlation::Block { size: 20, rho: 0.5 },
            seed: 99,
            ..SimulationConfig::default()
        };
        let a = simulate(&config).unwrap();
        let b = simulate(&config).unwrap();
        assert_eq!(a, b);
        let normal = Normal::standard();
        for (p, z) in a.table.pvalues().iter().zip(&a.z) {
            assert!((p - (1.0 - normal.cdf(*z))).abs() <= 1e-12);
        }
        let c = simulate(&config.replicate(1)).unwrap();
        assert_ne!(a.z, c.z);
    }

    #[test]
    fn identical_across_thread_counts() {
        let config = SimulationConfig {
            m: 9000,
            alternative: AlternativeKind::ShiftedGamma,
            correlation: Correlation::Ar1 { phi: -0.75 },
            seed: 4,
            ..SimulationConfig::default()
        };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| simulate(&config)).unwrap();
        let b = three.install(|| simulate(&config)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn block_size_must_divide_m() {
        let config = SimulationConfig {
            m: 30,
            correlation: Correlation::Block { size: 20, rho: 0.5 },
            ..SimulationConfig::default()
        };
        assert!(matches!(simulate(&config), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn signal_fraction_matches_baseline_density() {
        let config = SimulationConfig {
            m: 100_000,
            eta0: 2.5,
            k_d: 0.0,
            seed: 17,
            ..SimulationConfig::default()
        };
        let study = simulate(&config).unwrap();
        let frac = study.n_alternative() as f64 / config.m as f64;
        let target = 1.0 / (1.0 + 2.5f64.exp());
        assert!((frac - target).abs() <= 0.005, "fraction {frac}");
        assert_abs_diff_eq!(target, 0.0759, epsilon = 1e-4);
    }

    #[test]
    fn zero_strength_collapses_alternative() {
        let config = SimulationConfig {
            m: 50_000,
            eta0: 0.0,
            k_d: 0.0,
            k_s: 0.0,
            seed: 23,
            ..SimulationConfig::default()
        };
        let study = simulate(&config).unwrap();
        let mean_var = |sel: bool| {
            let v: Vec<f64> = study.z.iter().zip(&study.truth).filter(|(_, &h)| h == sel).map(|(z, _)| *z).collect();
            let n = v.len() as f64;
            let mu = v.iter().sum::<f64>() / n;
            (mu, v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        };
        let (m0, v0) = mean_var(false);
        let (m1, v1) = mean_var(true);
        assert!((m0 - m1).abs() < 0.03 && (v0 - v1).abs() < 0.04);
    }

    #[test]
    fn shifted_gamma_moments() {
        let config = SimulationConfig {
            m: 1_000_000,
            eta0: -30.0,
            k_d: 0.0,
            k_s: 2.4,
            alternative: AlternativeKind::ShiftedGamma,
            seed: 5,
            ..SimulationConfig::default()
        };
        let study = simulate(&config).unwrap();
        assert_eq!(study.n_alternative(), config.m);
        let n = study.z.len() as f64;
        let mean = study.z.iter().sum::<f64>() / n;
        let var = study.z.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 2.4).abs() <= 0.01, "mean {mean}");
        assert!((var - 1.0).abs() <= 0.01, "variance {var}");
    }

    #[test]
    fn correlation_targets() {
        let c = Correlation::BlockSigned { size: 20, sub: 10, rho: 0.5 };
        assert_eq!(c.target(0, 9), 0.5);
        assert_eq!(c.target(0, 10), -0.5);
        assert_eq!(c.target(12, 19), 0.5);
        assert_eq!(c.target(0, 20), 0.0);
        assert_abs_diff_eq!(Correlation::Ar1 { phi: 0.75 }.target(3, 5), 0.5625, epsilon = 1e-15);
    }

    #[test]
    fn correlation_check_small_runs() {
        for correlation in [
            Correlation::Independent,
            Correlation::Block { size: 20, rho: 0.5 },
            Correlation::BlockSigned { size: 20, sub: 10, rho: 0.5 },
            Correlation::Ar1 { phi: 0.75 },
        ] {
            let config = SimulationConfig {
                m: 40,
                correlation,
                seed: 12,
                ..SimulationConfig::default()
            };
            let report = empirical_correlation_check(&config, 4000).unwrap();
            assert!(report.max_class_deviation <= 0.03, "{correlation:?}: {report:?}");
            // unit variance within a few standard errors (sd of s^2 ~ sqrt(2/n))
            assert!(report.max_variance_deviation <= 4.0 * (2.0f64 / 4000.0).sqrt());
        }
        let big = SimulationConfig { m: 400, ..SimulationConfig::default() };
        assert!(empirical_correlation_check(&big, 10).is_err());
    }
}
