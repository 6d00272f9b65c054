//! Command-line interface: `simulate`, `estimate`, `montecarlo`, `decompose`.
//!
//! Every subcommand also reads a flat `key = value` file given with
//! `--config FILE`; keys are long flag names without the dashes, and flags on
//! the command line take precedence.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;
use serde_json::{json, Value};

use crate::equilibrium::{draw_scenario, OwnershipMode, ScenarioConfig, ScenarioName, SupplyForm};
use crate::error::{Error, ErrorKind, Result};
use crate::gmm::{build_instruments, two_step_estimate, GmmConfig, InstrumentKind};
use crate::inversion::InversionSettings;
use crate::io::{
    build_id, read_dataset_csv, write_aggregate_csv, write_dataset_csv, write_elasticity_histogram_csv,
    write_json, write_replications_csv, write_sweep_csv, Provenance,
};
use crate::likelihood::{mle_estimate, LikelihoodSettings, MleConfig, StartPolicy};
use crate::model::{MixedLogit, RcSource, ThetaNonlinear};
use crate::montecarlo::{
    likelihood_decomposition_sweep, parse_estimators, run_scenario, Estimator, MonteCarloOptions,
};
use crate::optimize::OptimizerSettings;
use crate::quadrature::DEFAULT_LEVEL;

#[derive(Debug, Parser)]
#[command(name = "blpmle", version = env!("CARGO_PKG_VERSION"), about = "Random-coefficients logit demand: simulation, MLE and GMM estimation, Monte Carlo")]
pub struct Cli {
    /// Worker threads (0 uses every core).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic dataset and write it as CSV plus a JSON sidecar.
    #[command(args_override_self = true)]
    Simulate(SimulateArgs),
    /// Estimate on a dataset CSV.
    #[command(args_override_self = true)]
    Estimate(EstimateArgs),
    /// Replicate a scenario and summarize both estimators.
    #[command(args_override_self = true)]
    Montecarlo(MonteCarloArgs),
    /// Likelihood decomposition along a grid of σ_x values.
    #[command(args_override_self = true)]
    Decompose(DecomposeArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScenarioArgs {
    /// no_cov, low_cov, high_cov, laplace_no_cov, laplace_low_cov, supply_misspec or ownership_misspec.
    #[arg(long, default_value = "no_cov")]
    pub scenario: String,
    /// Dataset seed, or the master seed for `montecarlo`.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Markets per dataset.
    #[arg(long, default_value_t = 20)]
    pub markets: usize,
    /// Gauss-Hermite nodes per random-coefficient dimension.
    #[arg(long, default_value_t = DEFAULT_LEVEL)]
    pub quadrature_level: usize,
}

impl ScenarioArgs {
    fn config(&self) -> Result<ScenarioConfig> {
        let name: ScenarioName = self.scenario.parse()?;
        let mut cfg = ScenarioConfig::preset(name, self.seed);
        cfg.n_markets = self.markets;
        cfg.quadrature_level = self.quadrature_level;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct NumericArgs {
    /// Share-inversion tolerance.
    #[arg(long, default_value_t = 1e-13)]
    pub inversion_tol: f64,
    #[arg(long, default_value_t = 1000)]
    pub inversion_max_iters: usize,
    /// Optimizer stops when the projected gradient is below this.
    #[arg(long, default_value_t = 1e-5)]
    pub grad_tol: f64,
    /// Optimizer iterations per start.
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
}

impl NumericArgs {
    fn validate(&self) -> Result<()> {
        if !(self.inversion_tol > 0.0 && self.grad_tol > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        Ok(())
    }

    fn inversion(&self) -> InversionSettings {
        InversionSettings {
            tol: self.inversion_tol,
            max_iters: self.inversion_max_iters,
            ..Default::default()
        }
    }

    fn optimizer(&self) -> OptimizerSettings {
        OptimizerSettings {
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Output directory; receives dataset.csv and dataset.json.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EstimateArgs {
    /// Dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// mle, gmm or both.
    #[arg(long, default_value = "mle")]
    pub estimator: String,
    /// Random-coefficient sources, e.g. `x1,price`.
    #[arg(long, default_value = "x1,price")]
    pub rc: String,
    /// Center of the start region: alpha followed by one sigma per random
    /// coefficient. Defaults to alpha = -1, sigma = 1 (0.1 on price).
    #[arg(long, allow_hyphen_values = true)]
    pub start: Option<String>,
    /// Random starting points per estimation.
    #[arg(long, default_value_t = 3)]
    pub starts: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// linear or log_linear.
    #[arg(long, default_value = "linear")]
    pub supply: String,
    /// true (from firm ids) or identity.
    #[arg(long, default_value = "true")]
    pub ownership: String,
    /// GMM instruments: differentiation_local, blp_sums or predicted_price.
    #[arg(long, default_value = "differentiation_local")]
    pub instruments: String,
    #[arg(long, default_value_t = DEFAULT_LEVEL)]
    pub quadrature_level: usize,
    /// Skip standard errors.
    #[arg(long)]
    pub no_se: bool,
    #[command(flatten)]
    pub numeric: NumericArgs,
    /// Result JSON path.
    #[arg(long, default_value = "estimate.json")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MonteCarloArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Replications.
    #[arg(long, default_value_t = 100)]
    pub sims: usize,
    /// mle, gmm or both.
    #[arg(long, default_value = "both")]
    pub estimator: String,
    /// GMM instruments: differentiation_local, blp_sums or predicted_price.
    #[arg(long, default_value = "differentiation_local")]
    pub instruments: String,
    /// Random starting points per estimation.
    #[arg(long, default_value_t = 3)]
    pub starts: usize,
    /// Skip standard errors.
    #[arg(long)]
    pub no_se: bool,
    /// Bins in the elasticity-bias histogram.
    #[arg(long, default_value_t = 30)]
    pub bins: usize,
    #[command(flatten)]
    pub numeric: NumericArgs,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DecomposeArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// σ_x grid; the other nonlinear parameters stay at their true values.
    #[arg(long, default_value_t = 1.5)]
    pub grid_min: f64,
    #[arg(long, default_value_t = 4.5)]
    pub grid_max: f64,
    #[arg(long, default_value_t = 0.05)]
    pub grid_step: f64,
    /// GMM instruments: differentiation_local, blp_sums or predicted_price.
    #[arg(long, default_value = "differentiation_local")]
    pub instruments: String,
    /// Output CSV path.
    #[arg(long, default_value = "decompose.csv")]
    pub out: PathBuf,
}

const SUBCOMMANDS: [&str; 4] = ["simulate", "estimate", "montecarlo", "decompose"];

/// Flat `key = value` lines; `#` starts a comment.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", i + 1)))?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

/// Splice `--config FILE` entries in front of the subcommand's own flags so
/// that explicit flags win.
pub fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut config = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            config = Some(it.next().ok_or_else(|| Error::Config("--config needs a path".into()))?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            config = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else { return Ok(rest) };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut injected = Vec::new();
    for (k, v) in parse_config_file(&text)? {
        match v.as_str() {
            "true" if is_switch(&k) => injected.push(format!("--{k}")),
            "false" if is_switch(&k) => {}
            _ => injected.push(format!("--{k}={v}")),
        }
    }
    let pos = rest
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.as_str()))
        .ok_or_else(|| Error::Config("no subcommand given".into()))?;
    rest.splice(pos + 1..pos + 1, injected);
    Ok(rest)
}

fn is_switch(key: &str) -> bool {
    key == "no-se"
}

fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let args = match expand_config(args.into_iter().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(e.kind());
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            warn!("could not configure the thread pool: {e}");
        }
    }
    let outcome = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, cli.threads),
        Command::Estimate(a) => cmd_estimate(a, cli.threads),
        Command::Montecarlo(a) => cmd_montecarlo(a, cli.threads),
        Command::Decompose(a) => cmd_decompose(a, cli.threads),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(e.kind())
        }
    }
}

fn provenance(command: &str, args: &impl Serialize, threads: usize) -> Provenance {
    let mut p = vec![
        ("build".to_string(), build_id()),
        ("command".to_string(), command.to_string()),
        ("threads".to_string(), threads.to_string()),
    ];
    let mut flat = BTreeMap::new();
    flatten("", &serde_json::to_value(args).unwrap_or(Value::Null), &mut flat);
    p.extend(flat);
    p
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        Value::Null => {}
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

fn provenance_json(p: &Provenance) -> Value {
    Value::Object(p.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect())
}

fn cmd_simulate(a: &SimulateArgs, threads: usize) -> Result<i32> {
    let cfg = a.scenario.config()?;
    let syn = draw_scenario(&cfg)?;
    let prov = provenance("simulate", a, threads);
    let csv_path = a.out.join("dataset.csv");
    write_dataset_csv(&csv_path, &syn.dataset, &prov)?;
    write_json(
        &a.out.join("dataset.json"),
        &json!({
            "provenance": provenance_json(&prov),
            "scenario": cfg,
            "true_theta": syn.true_theta,
            "true_linear": syn.true_linear,
            "true_sigma": syn.true_sigma,
            "observations": syn.dataset.n_observations(),
        }),
    )?;
    info!("wrote {}", csv_path.display());
    Ok(0)
}

fn parse_layout(s: &str) -> Result<Vec<RcSource>> {
    s.split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| match t {
            "price" => Ok(RcSource::Price),
            _ => t
                .strip_prefix('x')
                .and_then(|k| k.parse().ok())
                .map(RcSource::Demand)
                .ok_or_else(|| Error::Config(format!("unknown random-coefficient source {t:?}"))),
        })
        .collect()
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Config(format!("not a number: {t:?}"))))
        .collect()
}

fn parse_instruments(s: &str) -> Result<InstrumentKind> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown instrument kind {s:?}")))
}

fn cmd_estimate(a: &EstimateArgs, threads: usize) -> Result<i32> {
    a.numeric.validate()?;
    let estimators = parse_estimators(&a.estimator)?;
    let layout = parse_layout(&a.rc)?;
    let supply = match a.supply.as_str() {
        "linear" => SupplyForm::Linear,
        "log_linear" => SupplyForm::LogLinear,
        s => return Err(Error::Config(format!("unknown supply form {s:?}"))),
    };
    let ownership = match a.ownership.as_str() {
        "true" => OwnershipMode::True,
        "identity" => OwnershipMode::Identity,
        s => return Err(Error::Config(format!("unknown ownership mode {s:?}"))),
    };
    let instruments = parse_instruments(&a.instruments)?;
    let dataset = read_dataset_csv(&a.data)?;
    for src in &layout {
        if let RcSource::Demand(c) = src {
            if *c >= dataset.k_demand() {
                return Err(Error::Config(format!("random coefficient on x{c}, but the data has {} x columns", dataset.k_demand())));
            }
        }
    }
    let model = MixedLogit::with_level(layout.clone(), a.quadrature_level)?;
    let center = match &a.start {
        Some(s) => {
            let v = parse_floats(s)?;
            if v.len() != 1 + layout.len() {
                return Err(Error::Config(format!("--start needs {} values", 1 + layout.len())));
            }
            ThetaNonlinear::from_slice(&v)
        }
        None => ThetaNonlinear::new(
            -1.0,
            layout.iter().map(|s| if *s == RcSource::Price { 0.1 } else { 1.0 }).collect(),
        ),
    };
    let starts = StartPolicy {
        n_random: a.starts,
        ..StartPolicy::around(&center, a.seed)
    };
    let likelihood = LikelihoodSettings {
        inversion: a.numeric.inversion(),
        supply_form: supply,
        ownership,
        ..Default::default()
    };
    let mut blocks = Vec::new();
    let mut any_failed = None;
    for est in estimators {
        let result = match est {
            Estimator::Mle => {
                let mut c = MleConfig::new(starts.clone());
                c.likelihood = likelihood;
                c.optimizer = a.numeric.optimizer();
                c.standard_errors = !a.no_se;
                mle_estimate(&model, &dataset, &c).and_then(|r| Ok(serde_json::to_value(r)?))
            }
            Estimator::Gmm => {
                let mut c = GmmConfig::new(starts.clone());
                c.likelihood = likelihood;
                c.optimizer = a.numeric.optimizer();
                c.instruments = instruments;
                c.standard_errors = !a.no_se;
                build_instruments(&model, &dataset, instruments)
                    .and_then(|z| two_step_estimate(&model, &dataset, &z, &c))
                    .and_then(|r| Ok(serde_json::to_value(r)?))
            }
        };
        match result {
            Ok(v) => blocks.push(json!({ "estimator": est, "result": v })),
            Err(e) => {
                warn!("{est} failed: {e}");
                blocks.push(json!({ "estimator": est, "error": e.to_string() }));
                any_failed.get_or_insert(e);
            }
        }
    }
    let prov = provenance("estimate", a, threads);
    write_json(
        &a.out,
        &json!({
            "provenance": provenance_json(&prov),
            "start_policy": starts,
            "likelihood_settings": likelihood,
            "results": blocks,
        }),
    )?;
    match any_failed {
        Some(e) => Err(e),
        None => Ok(0),
    }
}

fn cmd_montecarlo(a: &MonteCarloArgs, threads: usize) -> Result<i32> {
    a.numeric.validate()?;
    let cfg = a.scenario.config()?;
    let estimators = parse_estimators(&a.estimator)?;
    let options = MonteCarloOptions {
        random_starts: a.starts,
        optimizer: a.numeric.optimizer(),
        inversion: a.numeric.inversion(),
        instruments: parse_instruments(&a.instruments)?,
        standard_errors: !a.no_se,
        ..Default::default()
    };
    let report = run_scenario(&cfg, a.sims, &estimators, a.scenario.seed, &options)?;
    let mut prov = provenance("montecarlo", a, threads);
    prov.push(("start_range".into(), format!("±{}·|truth|, floor {}", options.relative_range, options.floor)));
    let dir = &a.out;
    write_replications_csv(&dir.join("replications.csv"), &report, &prov)?;
    write_aggregate_csv(&dir.join("aggregate.csv"), &report, &prov)?;
    write_elasticity_histogram_csv(&dir.join("elasticity_hist.csv"), &report, a.bins, &prov)?;
    write_json(
        &dir.join("report.json"),
        &json!({ "provenance": provenance_json(&prov), "options": options, "report": report }),
    )?;
    let worst = report.failure_rates.iter().map(|f| f.1).fold(0.0, f64::max);
    for (est, rate) in &report.failure_rates {
        info!("{est}: failure rate {rate:.3}");
    }
    if worst > 0.5 {
        eprintln!("error: more than half of the replications failed");
        return Ok(3);
    }
    Ok(0)
}

fn cmd_decompose(a: &DecomposeArgs, threads: usize) -> Result<i32> {
    if !(a.grid_step > 0.0) || a.grid_max < a.grid_min || a.grid_min < 0.0 {
        return Err(Error::Config("grid needs 0 ≤ min ≤ max and a positive step".into()));
    }
    let cfg = a.scenario.config()?;
    let syn = draw_scenario(&cfg)?;
    let model = cfg.model()?;
    let n = ((a.grid_max - a.grid_min) / a.grid_step + 1e-9).floor() as usize + 1;
    let grid: Vec<f64> = (0..n).map(|i| a.grid_min + i as f64 * a.grid_step).collect();
    let rows = likelihood_decomposition_sweep(
        &model,
        &syn.dataset,
        &cfg.true_nonlinear,
        &grid,
        &cfg.likelihood_settings(),
        parse_instruments(&a.instruments)?,
    )?;
    write_sweep_csv(&a.out, &rows, &provenance("decompose", a, threads))?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn config_values_precede_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nsims = 5\nno_se = true\nscenario = high_cov\n").unwrap();
        let args = strings(&["blpmle", "montecarlo", "--config", path.to_str().unwrap(), "--sims", "7"]);
        let expanded = expand_config(args).unwrap();
        assert_eq!(
            expanded,
            strings(&["blpmle", "montecarlo", "--sims=5", "--no-se", "--scenario=high_cov", "--sims", "7"])
        );
        let cli = Cli::try_parse_from(expanded).unwrap();
        match cli.command {
            Command::Montecarlo(m) => {
                assert_eq!(m.sims, 7);
                assert!(m.no_se);
                assert_eq!(m.scenario.scenario, "high_cov");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_config_lines_are_usage_errors() {
        let e = parse_config_file("sims 5").unwrap_err();
        assert_eq!(e.kind(), ErrorKind::Usage);
    }

    #[test]
    fn layouts_and_instrument_names_parse() {
        assert_eq!(parse_layout("x1,price").unwrap(), vec![RcSource::Demand(1), RcSource::Price]);
        assert!(parse_layout("y").is_err());
        assert_eq!(parse_instruments("blp_sums").unwrap(), InstrumentKind::BlpSums);
        assert!(parse_instruments("optimal").is_err());
    }

    #[test]
    fn accepts_full_scale_monte_carlo_flags() {
        for s in ScenarioName::ALL {
            let cli = Cli::try_parse_from(strings(&[
                "blpmle", "montecarlo", "--sims", "1000", "--scenario", s.as_str(), "--estimator", "both",
            ]))
            .unwrap();
            match cli.command {
                Command::Montecarlo(m) => {
                    assert_eq!(m.sims, 1000);
                    m.scenario.config().unwrap();
                }
                other => panic!("{other:?}"),
            }
        }
    }
}
