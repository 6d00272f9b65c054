//! Monte Carlo harness: replicate a scenario, estimate with MLE and GMM, and
//! summarize bias, RMSE, standard errors, coverage and own-price elasticity
//! errors.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{draw_scenario, ScenarioConfig, SyntheticDataset};
use crate::error::{Error, Result};
use crate::gmm::{
    build_instruments, gmm_objective, two_step_estimate, GmmConfig, InstrumentKind, MomentSystem,
    SE_FEASIBILITY_THRESHOLD,
};
use crate::inversion::{invert_with_kernel, InversionSettings};
use crate::likelihood::{
    concentrated_loglik, mle_estimate, LikelihoodSettings, LinearDesign, MleConfig, StartPolicy,
};
use crate::model::{Dataset, MarketData, MixedLogit, RcSource, ThetaNonlinear};
use crate::optimize::OptimizerSettings;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Mle,
    Gmm,
}

impl Estimator {
    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::Mle => "mle",
            Estimator::Gmm => "gmm",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mle" => Ok(Estimator::Mle),
            "gmm" => Ok(Estimator::Gmm),
            _ => Err(Error::Config(format!("unknown estimator {s:?} (expected mle or gmm)"))),
        }
    }
}

/// Parse `mle`, `gmm` or `both`.
pub fn parse_estimators(s: &str) -> Result<Vec<Estimator>> {
    match s {
        "both" => Ok(vec![Estimator::Mle, Estimator::Gmm]),
        other => Ok(vec![other.parse()?]),
    }
}

/// Display names of the nonlinear parameters: `alpha`, then one entry per
/// random coefficient.
pub fn theta_names(layout: &[RcSource]) -> Vec<String> {
    let demand = layout.iter().filter(|s| matches!(s, RcSource::Demand(_))).count();
    let mut names = vec!["alpha".to_string()];
    names.extend(layout.iter().map(|s| match s {
        RcSource::Price => "sigma_price".to_string(),
        RcSource::Demand(_) if demand == 1 => "sigma_x".to_string(),
        RcSource::Demand(c) => format!("sigma_x{c}"),
    }));
    names
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonteCarloOptions {
    pub random_starts: usize,
    pub relative_range: f64,
    pub floor: f64,
    pub optimizer: OptimizerSettings,
    pub inversion: InversionSettings,
    pub instruments: InstrumentKind,
    pub standard_errors: bool,
    pub elasticities: bool,
}

impl Default for MonteCarloOptions {
    fn default() -> Self {
        Self {
            random_starts: 3,
            relative_range: 0.5,
            floor: 0.05,
            optimizer: OptimizerSettings::default(),
            inversion: InversionSettings::default(),
            instruments: InstrumentKind::DifferentiationLocal,
            standard_errors: true,
            elasticities: true,
        }
    }
}

/// One estimator's outcome on one replication.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub index: usize,
    pub seed: u64,
    pub estimator: Estimator,
    /// `None` when estimation failed.
    pub theta_hat: Option<Vec<f64>>,
    /// `NaN` where unavailable.
    pub standard_errors: Vec<f64>,
    pub se_flagged: Vec<bool>,
    pub converged: bool,
    /// Mean over products of `ê_jj − e_jj`.
    pub elasticity_bias: Option<f64>,
    /// Mean over products of `|ê_jj − e_jj|`.
    pub elasticity_abs_bias: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub estimator: Estimator,
    pub parameter: String,
    pub truth: f64,
    pub replications: usize,
    pub estimates: usize,
    pub mean_bias: f64,
    pub rmse: f64,
    pub variance: f64,
    pub mean_se: f64,
    pub coverage: f64,
    /// Share of available estimates whose SE was flagged and dropped from
    /// `mean_se` and `coverage`.
    pub se_drop_rate: f64,
    /// `mean_se` and `coverage` with flagged rows kept (non-finite SEs still
    /// excluded).
    pub mean_se_all: f64,
    pub coverage_all: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticitySummary {
    pub estimator: Estimator,
    pub replications: usize,
    pub mean_bias: f64,
    pub mean_abs_bias: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulationReport {
    pub scenario: String,
    pub master_seed: u64,
    pub parameter_names: Vec<String>,
    pub truth: Vec<f64>,
    pub records: Vec<ReplicationRecord>,
    pub parameters: Vec<ParameterSummary>,
    pub elasticities: Vec<ElasticitySummary>,
    /// Failed estimations over attempted ones, per estimator.
    pub failure_rates: Vec<(Estimator, f64)>,
}

const Z_95: f64 = 1.959_963_984_540_054;

impl SimulationReport {
    /// Aggregate records. The result depends only on the multiset of records.
    pub fn from_records(
        scenario: &str,
        master_seed: u64,
        parameter_names: Vec<String>,
        truth: Vec<f64>,
        mut records: Vec<ReplicationRecord>,
    ) -> Self {
        records.sort_by_key(|r| (r.index, r.estimator));
        let mut estimators: Vec<Estimator> = records.iter().map(|r| r.estimator).collect();
        estimators.sort();
        estimators.dedup();
        let mut parameters = Vec::new();
        let mut elasticities = Vec::new();
        let mut failure_rates = Vec::new();
        for &est in &estimators {
            let rows: Vec<&ReplicationRecord> = records.iter().filter(|r| r.estimator == est).collect();
            let failed = rows.iter().filter(|r| r.theta_hat.is_none()).count();
            failure_rates.push((est, failed as f64 / rows.len() as f64));
            for (k, name) in parameter_names.iter().enumerate() {
                parameters.push(summarize(est, name, truth[k], k, &rows));
            }
            let (b, a): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter_map(|r| Some((r.elasticity_bias?, r.elasticity_abs_bias?)))
                .unzip();
            elasticities.push(ElasticitySummary {
                estimator: est,
                replications: b.len(),
                mean_bias: mean(&b),
                mean_abs_bias: mean(&a),
            });
        }
        Self {
            scenario: scenario.to_string(),
            master_seed,
            parameter_names,
            truth,
            records,
            parameters,
            elasticities,
            failure_rates,
        }
    }

    /// Replications with index below `n`, re-aggregated.
    pub fn first(&self, n: usize) -> Self {
        let records = self.records.iter().filter(|r| r.index < n).cloned().collect();
        Self::from_records(&self.scenario, self.master_seed, self.parameter_names.clone(), self.truth.clone(), records)
    }

    pub fn summary(&self, estimator: Estimator, parameter: &str) -> Option<&ParameterSummary> {
        self.parameters.iter().find(|p| p.estimator == estimator && p.parameter == parameter)
    }

    pub fn elasticity(&self, estimator: Estimator) -> Option<&ElasticitySummary> {
        self.elasticities.iter().find(|e| e.estimator == estimator)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn summarize(est: Estimator, name: &str, truth: f64, k: usize, rows: &[&ReplicationRecord]) -> ParameterSummary {
    let estimates: Vec<f64> = rows.iter().filter_map(|r| r.theta_hat.as_ref().map(|t| t[k])).collect();
    let errors: Vec<f64> = estimates.iter().map(|e| e - truth).collect();
    let bias = mean(&errors);
    let mse = mean(&errors.iter().map(|e| e * e).collect::<Vec<_>>());
    let m = mean(&estimates);
    let variance = mean(&estimates.iter().map(|e| (e - m).powi(2)).collect::<Vec<_>>());

    let with_se: Vec<(f64, f64, bool)> = rows
        .iter()
        .filter_map(|r| {
            let t = r.theta_hat.as_ref()?;
            Some((t[k], r.standard_errors[k], r.se_flagged[k]))
        })
        .collect();
    let covered = |(est, se): (f64, f64)| ((est - truth).abs() <= Z_95 * se) as u8 as f64;
    let kept: Vec<(f64, f64)> = with_se.iter().filter(|(_, se, f)| !f && se.is_finite()).map(|&(e, s, _)| (e, s)).collect();
    let finite: Vec<(f64, f64)> = with_se.iter().filter(|(_, se, _)| se.is_finite()).map(|&(e, s, _)| (e, s)).collect();
    let flagged = with_se.iter().filter(|(_, se, f)| *f || !se.is_finite()).count();
    ParameterSummary {
        estimator: est,
        parameter: name.to_string(),
        truth,
        replications: rows.len(),
        estimates: estimates.len(),
        mean_bias: bias,
        rmse: mse.sqrt(),
        variance,
        mean_se: mean(&kept.iter().map(|p| p.1).collect::<Vec<_>>()),
        coverage: mean(&kept.iter().map(|&p| covered(p)).collect::<Vec<_>>()),
        se_drop_rate: if with_se.is_empty() { 0.0 } else { flagged as f64 / with_se.len() as f64 },
        mean_se_all: mean(&finite.iter().map(|p| p.1).collect::<Vec<_>>()),
        coverage_all: mean(&finite.iter().map(|&p| covered(p)).collect::<Vec<_>>()),
    }
}

/// Own-price elasticities `e_jj = (∂s_j/∂p_j) p_j / s_j` at the mean
/// utilities that rationalize the observed shares under `theta`.
pub fn own_price_elasticities(
    model: &MixedLogit,
    market: &MarketData,
    theta: &ThetaNonlinear,
    inversion: &InversionSettings,
) -> Result<DVector<f64>> {
    if market.shares.iter().any(|s| *s <= 0.0) {
        return Err(Error::InvalidInput("zero share in elasticity computation".into()));
    }
    let kernel = model.kernel(market, theta)?;
    let (delta, _) = invert_with_kernel(&kernel, &market.shares, None, inversion)
        .map_err(|e| e.in_market(market.market_id))?;
    let ns = kernel.node_shares(&delta);
    let j_sp = kernel.j_sp(&ns);
    Ok(DVector::from_fn(market.n_products(), |j, _| {
        j_sp[(j, j)] * market.prices[j] / ns.shares[j]
    }))
}

fn elasticity_errors(
    model: &MixedLogit,
    dataset: &Dataset,
    theta_hat: &ThetaNonlinear,
    truth: &ThetaNonlinear,
    inversion: &InversionSettings,
) -> Result<(f64, f64)> {
    let (mut sum, mut abs, mut n) = (0.0, 0.0, 0.0);
    for m in &dataset.markets {
        let e_hat = own_price_elasticities(model, m, theta_hat, inversion)?;
        let e = own_price_elasticities(model, m, truth, inversion)?;
        for (a, b) in e_hat.iter().zip(e.iter()) {
            sum += a - b;
            abs += (a - b).abs();
            n += 1.0;
        }
    }
    Ok((sum / n, abs / n))
}

/// Seed of replication `index`.
pub fn replication_seed(master_seed: u64, config: &ScenarioConfig, index: usize) -> u64 {
    rng::hash64(master_seed, config.name.as_str(), index as u64)
}

fn failed_record(index: usize, seed: u64, estimator: Estimator, k: usize, e: &Error) -> ReplicationRecord {
    ReplicationRecord {
        index,
        seed,
        estimator,
        theta_hat: None,
        standard_errors: vec![f64::NAN; k],
        se_flagged: vec![true; k],
        converged: false,
        elasticity_bias: None,
        elasticity_abs_bias: None,
        error: Some(e.to_string()),
    }
}

fn run_replication(
    config: &ScenarioConfig,
    index: usize,
    estimators: &[Estimator],
    master_seed: u64,
    options: &MonteCarloOptions,
) -> Vec<ReplicationRecord> {
    let seed = replication_seed(master_seed, config, index);
    let k = 1 + config.rc_layout.len();
    let mut cfg = config.clone();
    cfg.seed = seed;
    let prepared = draw_scenario(&cfg).and_then(|syn| Ok((cfg.model()?, syn)));
    let (model, syn) = match prepared {
        Ok(p) => p,
        Err(e) => {
            warn!("replication {index}: data generation failed: {e}");
            return estimators.iter().map(|&est| failed_record(index, seed, est, k, &e)).collect();
        }
    };
    let starts = StartPolicy {
        n_random: options.random_starts,
        relative_range: options.relative_range,
        floor: options.floor,
        ..StartPolicy::around(&cfg.true_nonlinear, rng::derive(seed, 0x5354_4152_5453))
    };
    let settings = LikelihoodSettings {
        inversion: options.inversion,
        ..cfg.likelihood_settings()
    };
    estimators
        .iter()
        .map(|&est| {
            let outcome = match est {
                Estimator::Mle => estimate_mle(&model, &syn, &starts, &settings, options, k),
                Estimator::Gmm => estimate_gmm(&model, &syn, &starts, &settings, options),
            };
            match outcome {
                Ok((theta, se, flagged, converged)) => {
                    let el = if options.elasticities {
                        elasticity_errors(&model, &syn.dataset, &theta, &syn.true_theta, &options.inversion)
                            .map_err(|e| warn!("replication {index}: elasticities failed: {e}"))
                            .ok()
                    } else {
                        None
                    };
                    info!("replication {index} {est}: theta = {:?}", theta.to_vec());
                    ReplicationRecord {
                        index,
                        seed,
                        estimator: est,
                        theta_hat: Some(theta.to_vec()),
                        standard_errors: se,
                        se_flagged: flagged,
                        converged,
                        elasticity_bias: el.map(|e| e.0),
                        elasticity_abs_bias: el.map(|e| e.1),
                        error: None,
                    }
                }
                Err(e) => {
                    warn!("replication {index} {est}: {e}");
                    failed_record(index, seed, est, k, &e)
                }
            }
        })
        .collect()
}

type Estimate = (ThetaNonlinear, Vec<f64>, Vec<bool>, bool);

fn estimate_mle(
    model: &MixedLogit,
    syn: &SyntheticDataset,
    starts: &StartPolicy,
    settings: &LikelihoodSettings,
    options: &MonteCarloOptions,
    k: usize,
) -> Result<Estimate> {
    let mut config = MleConfig::new(starts.clone());
    config.likelihood = *settings;
    config.optimizer = options.optimizer;
    config.standard_errors = options.standard_errors;
    let r = mle_estimate(model, &syn.dataset, &config)?;
    let se: Vec<f64> = match &r.standard_errors {
        Some(s) => {
            let mut names = vec!["alpha".to_string()];
            names.extend((0..model.k_rc()).map(|i| format!("sigma_{i}")));
            names.iter().map(|n| s.get(n).unwrap_or(f64::NAN)).collect()
        }
        None => vec![f64::NAN; k],
    };
    let flagged = se.iter().map(|v| !v.is_finite() || *v > SE_FEASIBILITY_THRESHOLD).collect();
    Ok((r.theta_hat, se, flagged, r.converged))
}

fn estimate_gmm(
    model: &MixedLogit,
    syn: &SyntheticDataset,
    starts: &StartPolicy,
    settings: &LikelihoodSettings,
    options: &MonteCarloOptions,
) -> Result<Estimate> {
    let instruments = build_instruments(model, &syn.dataset, options.instruments)?;
    let mut config = GmmConfig::new(starts.clone());
    config.likelihood = *settings;
    config.optimizer = options.optimizer;
    config.instruments = options.instruments;
    config.standard_errors = options.standard_errors;
    let r = two_step_estimate(model, &syn.dataset, &instruments, &config)?;
    let k = r.theta_hat.len();
    let (se, flagged) = match &r.standard_errors {
        Some(s) => (s.values[..k].to_vec(), s.flagged[..k].to_vec()),
        None => (vec![f64::NAN; k], vec![true; k]),
    };
    Ok((r.theta_hat, se, flagged, r.converged))
}

/// Run `n_sims` replications of `config`, each with its own derived seed.
/// Failures are recorded per replication and never abort the batch.
pub fn run_scenario(
    config: &ScenarioConfig,
    n_sims: usize,
    estimators: &[Estimator],
    master_seed: u64,
    options: &MonteCarloOptions,
) -> Result<SimulationReport> {
    config.validate()?;
    let started = Instant::now();
    let records: Vec<ReplicationRecord> = (0..n_sims)
        .into_par_iter()
        .flat_map_iter(|i| run_replication(config, i, estimators, master_seed, options))
        .collect();
    info!(
        "{}: {n_sims} replications in {:.1}s",
        config.name,
        started.elapsed().as_secs_f64()
    );
    Ok(SimulationReport::from_records(
        config.name.as_str(),
        master_seed,
        theta_names(&config.rc_layout),
        config.true_nonlinear.to_vec(),
        records,
    ))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistogramBin {
    pub estimator: Estimator,
    pub metric: String,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Histogram of per-replication elasticity bias and absolute bias, with
/// bins shared across estimators.
pub fn elasticity_histogram(report: &SimulationReport, bins: usize) -> Vec<HistogramBin> {
    let mut out = Vec::new();
    let metrics: [(&str, fn(&ReplicationRecord) -> Option<f64>); 2] = [
        ("bias", |r| r.elasticity_bias),
        ("abs_bias", |r| r.elasticity_abs_bias),
    ];
    for (metric, get) in metrics {
        let all: Vec<f64> = report.records.iter().filter_map(get).filter(|v| v.is_finite()).collect();
        if all.is_empty() || bins == 0 {
            continue;
        }
        let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        for est in report.elasticities.iter().map(|e| e.estimator) {
            let mut counts = vec![0usize; bins];
            for v in report.records.iter().filter(|r| r.estimator == est).filter_map(get) {
                if v.is_finite() {
                    counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
                }
            }
            for (b, count) in counts.into_iter().enumerate() {
                out.push(HistogramBin {
                    estimator: est,
                    metric: metric.to_string(),
                    lower: lo + b as f64 * width,
                    upper: lo + (b + 1) as f64 * width,
                    count,
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma_x: f64,
    /// `log|Σ*|`.
    pub log_det_sigma: Option<f64>,
    /// `−(N/2) log|Σ*|`.
    pub covariance_term: Option<f64>,
    pub jacobian_term: Option<f64>,
    pub total: Option<f64>,
    /// `N ĝᵀΨĝ` under the first-step weight.
    pub gmm_objective: Option<f64>,
}

/// Evaluate the concentrated likelihood, its two parts, and the first-step
/// GMM objective along a grid of `σ_x` values, holding the other nonlinear
/// parameters at `theta`. Failed grid points are left empty.
pub fn likelihood_decomposition_sweep(
    model: &MixedLogit,
    dataset: &Dataset,
    theta: &ThetaNonlinear,
    grid: &[f64],
    settings: &LikelihoodSettings,
    instruments: InstrumentKind,
) -> Result<Vec<SweepRow>> {
    let idx = model
        .layout()
        .iter()
        .position(|s| matches!(s, RcSource::Demand(_)))
        .ok_or_else(|| Error::Config("the sweep needs a random coefficient on a characteristic".into()))?;
    let z = build_instruments(model, dataset, instruments)?;
    let system = MomentSystem::new(&z, LinearDesign::from_dataset(dataset)?)?;
    let weight = system.two_stage_weight()?;
    let nf = system.n_obs() as f64;
    Ok(grid
        .iter()
        .map(|&sx| {
            let mut th = theta.clone();
            th.sigma[idx] = sx;
            let ll = concentrated_loglik(model, dataset, &th, settings)
                .map_err(|e| warn!("sweep point {sx}: {e}"))
                .ok();
            let q = gmm_objective(model, dataset, &system, &th, &weight, settings)
                .map_err(|e| warn!("sweep point {sx}: {e}"))
                .ok();
            SweepRow {
                sigma_x: sx,
                log_det_sigma: ll.as_ref().map(|l| l.fit.sigma.determinant().ln()),
                covariance_term: ll.as_ref().map(|l| l.covariance_term),
                jacobian_term: ll.as_ref().map(|l| l.jacobian_term),
                total: ll.as_ref().map(|l| l.total),
                gmm_objective: q.map(|q| nf * q),
            }
        })
        .collect())
}

/// `σ_x` at the smallest and largest values of a column, skipping gaps.
pub fn sweep_extrema(rows: &[SweepRow], column: impl Fn(&SweepRow) -> Option<f64>) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| Some((r.sigma_x, column(r)?))).collect();
    let argmin = pts.iter().min_by(|a, b| a.1.total_cmp(&b.1))?.0;
    let argmax = pts.iter().max_by(|a, b| a.1.total_cmp(&b.1))?.0;
    Some((argmin, argmax))
}
