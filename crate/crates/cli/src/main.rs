use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use cafwer::decision::{DecisionParams, WinsorBounds};
use cafwer::estimation::{default_lambda_grid, EmOptions};
use cafwer::evaluation::{perturbation_diagnostic, run_experiment, u_min_over_k, Method, PerturbationOptions};
use cafwer::io::{read_key_values, read_table, standardize_covariates, write_decisions, write_json, write_table, Standardization};
use cafwer::model::{HypothesisTable, ParamBounds};
use cafwer::pipeline::{choose_gamma, fit_pipeline, run_pipeline, GammaChoice, PipelineOptions};
use cafwer::simulation::{simulate, Setup, SimulationConfig};
use cafwer::Error;
use clap::{Args, Parser, Subcommand};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

/// Covariate-adaptive family-wise error rate control.
#[derive(Debug, Parser)]
#[command(name = "cafwer", version, args_override_self = true)]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "CAFWER_THREADS", default_value_t = 0)]
    threads: usize,

    /// Read default flag values from a `key = value` file; flags given on
    /// the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the mixture model and write the fit as JSON.
    Fit(FitArgs),
    /// Fit and write per-hypothesis thresholds and decisions as TSV.
    Reject(FitArgs),
    /// Simulate a study and write it as TSV with a truth column.
    Simulate(SimulateArgs),
    /// Replicated comparison of procedures on simulated data.
    Evaluate(EvaluateArgs),
    /// Threshold stability under single p-value perturbations, and u(gamma, k).
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Clone, Args)]
struct ModelArgs {
    /// Target family-wise error rate.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Censoring level: `auto` (bootstrap choice) or a value in (0, 1).
    #[arg(long, default_value = "auto")]
    gamma: String,
    /// Lower clamp for the null probabilities.
    #[arg(long, default_value_t = 0.01)]
    eps1: f64,
    /// Upper clamp for the null probabilities.
    #[arg(long, default_value_t = 0.99)]
    eps2: f64,
    /// Floor on the Lagrange level.
    #[arg(long, default_value_t = 1e-10)]
    epsilon: f64,
    /// Hold the alternative shape fixed.
    #[arg(long)]
    fixed_k: Option<f64>,
    /// Bootstrap resamples for the censoring level.
    #[arg(long, default_value_t = 100)]
    n_boot: usize,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    /// Relative log-likelihood tolerance of EM.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Seed of the bootstrap.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run EM only from the small-p initializer.
    #[arg(long)]
    single_start: bool,
    /// Accelerate EM by squared extrapolation (monotone, order-sensitive).
    #[arg(long)]
    accelerate: bool,
}

impl ModelArgs {
    fn pipeline(&self) -> Result<PipelineOptions> {
        let gamma = if self.gamma.eq_ignore_ascii_case("auto") {
            GammaChoice::Auto
        } else {
            let g: f64 = self
                .gamma
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("--gamma expects 'auto' or a number, got '{}'", self.gamma)))?;
            GammaChoice::Fixed(g)
        };
        let winsor = WinsorBounds {
            eps1: self.eps1,
            eps2: self.eps2,
        };
        let opts = PipelineOptions {
            gamma,
            lambda_grid: default_lambda_grid(),
            n_boot: self.n_boot,
            seed: self.seed,
            em: EmOptions {
                max_iterations: self.max_iter,
                tol: self.tol,
                fixed_k: self.fixed_k,
                bounds: ParamBounds::default(),
                winsor,
                accelerate: self.accelerate,
                ..EmOptions::default()
            },
            decision: DecisionParams {
                alpha: self.alpha,
                epsilon: self.epsilon,
                winsor,
            },
            multi_start: !self.single_start,
        };
        opts.em.validate()?;
        opts.decision.validate()?;
        if let GammaChoice::Fixed(g) = gamma {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::InvalidArgument(format!("--gamma must lie in (0, 1), got {g}")).into());
            }
        }
        if self.n_boot == 0 && gamma == GammaChoice::Auto {
            return Err(Error::InvalidArgument("--n-boot must be positive".into()).into());
        }
        Ok(opts)
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Tab- or comma-separated table: id, pvalue, covariates...
    #[arg(long, short)]
    input: PathBuf,
    /// Output file (JSON for `fit`, TSV for `reject`; `reject` also writes
    /// `<out>.json`).
    #[arg(long, short)]
    out: PathBuf,
    /// Use covariates as given instead of median-centring and robust scaling.
    #[arg(long)]
    no_standardize: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct SimArgs {
    /// Simulation setting: S0, S1, S2.1, S2.2, S2.3 or S2.4.
    #[arg(long, default_value = "S0")]
    setup: Setup,
    #[arg(long, default_value_t = 10_000)]
    m: usize,
    /// Baseline log-odds of a hypothesis being null.
    #[arg(long, default_value_t = 2.5)]
    eta0: f64,
    /// Covariate effect on the log-odds.
    #[arg(long, default_value_t = 1.0)]
    kd: f64,
    /// Signal strength.
    #[arg(long, default_value_t = 2.4)]
    ks: f64,
}

impl SimArgs {
    fn config(&self, seed: u64) -> Result<SimulationConfig> {
        let config = SimulationConfig {
            m: self.m,
            eta0: self.eta0,
            k_d: self.kd,
            k_s: self.ks,
            seed,
            ..SimulationConfig::for_setup(self.setup)
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output TSV; metadata goes to `<out>.json`.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    sim: SimArgs,
    /// Comma-separated target levels.
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.1,0.15,0.2")]
    alpha_grid: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    /// Comma-separated subset of camt, weighted_bonferroni, holm, bonferroni, oracle.
    #[arg(long, value_delimiter = ',', default_value = "camt,weighted_bonferroni,holm,bonferroni,oracle")]
    methods: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Long-format TSV of summaries; metadata goes to `<out>.json`.
    #[arg(long, short)]
    out: PathBuf,
    /// Censoring level used by the adaptive fit.
    #[arg(long, default_value = "auto")]
    gamma: String,
    #[arg(long, default_value_t = 100)]
    n_boot: usize,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[arg(long, short)]
    input: PathBuf,
    /// Output directory for perturbation.tsv, u_gamma_k.tsv and diagnose.json.
    #[arg(long, short)]
    out: PathBuf,
    /// Number of hypotheses to perturb.
    #[arg(long, default_value_t = 50)]
    n_sample: usize,
    #[arg(long)]
    no_standardize: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    software: &'static str,
    version: &'static str,
    command: &'static str,
    input: Option<String>,
    threads: usize,
    seed: u64,
    standardize: Option<bool>,
    standardization: Option<&'a Standardization>,
    options: Option<&'a PipelineOptions>,
    results: serde_json::Value,
}

fn load_table(path: &Path, no_standardize: bool) -> Result<(HypothesisTable, Option<Standardization>)> {
    let table = read_table(path).with_context(|| format!("reading {}", path.display()))?;
    if no_standardize || table.d() == 0 {
        return Ok((table, None));
    }
    let (table, info) = standardize_covariates(&table)?;
    Ok((table, Some(info)))
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn cmd_fit(args: &FitArgs, threads: usize, reject: bool) -> Result<()> {
    let opts = args.model.pipeline()?;
    let (table, standardization) = load_table(&args.input, args.no_standardize)?;
    let command = if reject { "reject" } else { "fit" };
    let (fitted, decisions) = if reject {
        let (f, d) = run_pipeline(&table, &opts)?;
        (f, Some(d))
    } else {
        (fit_pipeline(&table, &opts)?, None)
    };
    if !fitted.fit.converged {
        log::warn!("EM stopped after {} iterations without converging", fitted.fit.iterations);
    }
    let mut results = json!({
        "m": table.m(),
        "d": table.d(),
        "beta": fitted.fit.params.beta,
        "k": fitted.fit.params.k,
        "gamma": fitted.gamma,
        "pi_s": fitted.pi_s,
        "storey": fitted.storey,
        "init": fitted.init,
        "converged": fitted.fit.converged,
        "iterations": fitted.fit.iterations,
        "loglik_trace": fitted.fit.loglik_trace,
    });
    if let Some(d) = &decisions {
        for w in &d.warnings {
            log::warn!("{w}");
        }
        results["alpha"] = json!(d.alpha);
        results["tau_tilde"] = json!(d.tau_tilde);
        results["tau_hat"] = json!(d.tau_hat);
        results["epsilon"] = json!(d.epsilon);
        results["eps1"] = json!(d.eps1);
        results["eps2"] = json!(d.eps2);
        results["n_rejected"] = json!(d.n_rejected());
        results["warnings"] = json!(d.warnings);
    }
    let record = RunRecord {
        software: "cafwer",
        version: cafwer::VERSION,
        command,
        input: Some(args.input.display().to_string()),
        threads,
        seed: opts.seed,
        standardize: Some(!args.no_standardize),
        standardization: standardization.as_ref(),
        options: Some(&opts),
        results,
    };
    match &decisions {
        Some(d) => {
            write_decisions(&args.out, &table, d)?;
            write_json(sidecar_path(&args.out), &record)?;
            log::info!("{} of {} hypotheses rejected", d.n_rejected(), table.m());
        }
        None => write_json(&args.out, &record)?,
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs, threads: usize) -> Result<()> {
    let config = args.sim.config(args.seed)?;
    let study = simulate(&config)?;
    write_table(&args.out, &study.table, Some(("truth", &study.truth)))?;
    let record = RunRecord {
        software: "cafwer",
        version: cafwer::VERSION,
        command: "simulate",
        input: None,
        threads,
        seed: args.seed,
        standardize: None,
        standardization: None,
        options: None,
        results: json!({
            "setup": args.sim.setup.to_string(),
            "config": config,
            "n_alternative": study.n_alternative(),
        }),
    };
    write_json(sidecar_path(&args.out), &record)?;
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs, threads: usize) -> Result<()> {
    let config = args.sim.config(args.seed)?;
    let methods = args
        .methods
        .iter()
        .map(|m| m.parse::<Method>())
        .collect::<cafwer::Result<Vec<_>>>()?;
    let model = ModelArgs {
        gamma: args.gamma.clone(),
        n_boot: args.n_boot,
        seed: args.seed,
        ..default_model_args()
    };
    let opts = model.pipeline()?;
    let summaries = run_experiment(&config, &methods, &args.alpha_grid, args.reps, args.seed, &opts)?;

    let mut out = fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    writeln!(
        out,
        "setup\tm\teta0\tkd\tks\tmethod\talpha\tn_rep\tn_failed\tfwer_hat\tfwer_lo\tfwer_hi\ttpr_hat\ttpr_se\tmean_rejections"
    )?;
    for s in &summaries {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            args.sim.setup,
            config.m,
            config.eta0,
            config.k_d,
            config.k_s,
            s.method,
            s.alpha,
            s.n_rep,
            s.n_failed,
            s.fwer_hat,
            s.fwer_ci.0,
            s.fwer_ci.1,
            s.tpr_hat,
            s.tpr_se,
            s.mean_rejections
        )?;
    }
    let record = RunRecord {
        software: "cafwer",
        version: cafwer::VERSION,
        command: "evaluate",
        input: None,
        threads,
        seed: args.seed,
        standardize: None,
        standardization: None,
        options: Some(&opts),
        results: json!({
            "setup": args.sim.setup.to_string(),
            "config": config,
            "reps": args.reps,
            "methods": methods,
            "alpha_grid": args.alpha_grid,
            "summaries": summaries,
        }),
    };
    write_json(sidecar_path(&args.out), &record)?;
    Ok(())
}

fn cmd_diagnose(args: &DiagnoseArgs, threads: usize) -> Result<()> {
    let opts = args.model.pipeline()?;
    let (table, standardization) = load_table(&args.input, args.no_standardize)?;
    let (gamma, _, _) = choose_gamma(table.pvalues(), &opts)?;
    let n = args.n_sample.min(table.m());
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed_for_sample());
    let mut js = sample(&mut rng, table.m(), n).into_vec();
    js.sort_unstable();
    let popts = PerturbationOptions {
        pipeline: opts.clone(),
        fixed_init: None,
    };
    let diag = perturbation_diagnostic(&table, gamma, &popts, &js)?;

    fs::create_dir_all(&args.out)?;
    let mut out = fs::File::create(args.out.join("perturbation.tsv"))?;
    writeln!(out, "index\tid\tdiagnostic")?;
    for (&j, d) in js.iter().zip(&diag) {
        match d {
            Some(v) => writeln!(out, "{}\t{}\t{:.16e}", j, table.ids()[j], v)?,
            None => writeln!(out, "{}\t{}\tNA", j, table.ids()[j])?,
        }
    }
    let mut u_out = fs::File::create(args.out.join("u_gamma_k.tsv"))?;
    writeln!(u_out, "gamma\tk_min\tu_min")?;
    let mut u_rows = Vec::new();
    for i in 1..20 {
        let g = i as f64 / 20.0;
        let (k, u) = u_min_over_k(g, 1e-3);
        writeln!(u_out, "{g}\t{k}\t{u:.10}")?;
        u_rows.push(json!({"gamma": g, "k_min": k, "u_min": u}));
    }
    let ok: Vec<f64> = diag.iter().flatten().copied().collect();
    let median = median(&ok);
    let record = RunRecord {
        software: "cafwer",
        version: cafwer::VERSION,
        command: "diagnose",
        input: Some(args.input.display().to_string()),
        threads,
        seed: args.model.seed,
        standardize: Some(!args.no_standardize),
        standardization: standardization.as_ref(),
        options: Some(&opts),
        results: json!({
            "gamma": gamma,
            "n_sample": n,
            "n_failed": diag.len() - ok.len(),
            "median_diagnostic": median,
            "u_min_by_gamma": u_rows,
        }),
    };
    write_json(args.out.join("diagnose.json"), &record)?;
    Ok(())
}

impl DiagnoseArgs {
    fn seed_for_sample(&self) -> u64 {
        cafwer::simulation::replicate_seed(self.model.seed, 1)
    }
}

fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

fn default_model_args() -> ModelArgs {
    ModelArgs {
        alpha: 0.05,
        gamma: "auto".into(),
        eps1: 0.01,
        eps2: 0.99,
        epsilon: 1e-10,
        fixed_k: None,
        n_boot: 100,
        max_iter: 200,
        tol: 1e-6,
        seed: 0,
        single_start: false,
        accelerate: false,
    }
}

/// Inserts `--key value` pairs from a config file right after the
/// subcommand, so explicit flags that follow override them.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(pos) = argv.iter().position(|a| a == "--config") else {
        return Ok(argv);
    };
    let path = argv
        .get(pos + 1)
        .ok_or_else(|| Error::InvalidArgument("--config needs a file".into()))?
        .clone();
    let mut rest: Vec<OsString> = argv.iter().enumerate().filter(|&(i, _)| i != pos && i != pos + 1).map(|(_, a)| a.clone()).collect();
    let mut injected = Vec::new();
    for (key, value) in read_key_values(&path)? {
        let flag = format!("--{}", key.replace('_', "-"));
        match value.as_str() {
            "true" => injected.push(OsString::from(flag)),
            "false" => {}
            _ => {
                injected.push(OsString::from(flag));
                injected.push(OsString::from(value));
            }
        }
    }
    let sub = rest
        .iter()
        .position(|a| matches!(a.to_str(), Some("fit" | "reject" | "simulate" | "evaluate" | "diagnose")))
        .ok_or_else(|| Error::InvalidArgument("no subcommand given".into()))?;
    rest.splice(sub + 1..sub + 1, injected);
    Ok(rest)
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let threads = rayon::current_num_threads();
    match &cli.command {
        Command::Fit(a) => cmd_fit(a, threads, false),
        Command::Reject(a) => cmd_fit(a, threads, true),
        Command::Simulate(a) => cmd_simulate(a, threads),
        Command::Evaluate(a) => cmd_evaluate(a, threads),
        Command::Diagnose(a) => cmd_diagnose(a, threads),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_validation() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv = match expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let cli = Cli::parse_from(argv);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
