//! Two-step GMM with an analytic IV inner loop.
//!
//! Moments are `E[Z_d ξ] = 0` and `E[Z_s u] = 0`. At fixed `θ` the linear
//! parameters solve a linear IV-GMM problem in closed form, so the outer
//! optimizer only searches over `θ`.

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{
    evaluate_theta, theta_bounds, LikelihoodSettings, LinearDesign, StartPolicy, StartRecord,
    ThetaEval, WarmStarts,
};
use crate::linalg::{condition_number, independent_columns, ols, select_columns, spd_inverse};
use crate::model::{stack_matrices, Dataset, LinearParams, MarketData, MixedLogit, RcSource, ThetaNonlinear};
use crate::optimize::{minimize, OptimizerSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrumentKind {
    /// Counts of own-firm and rival products within one standard deviation
    /// of each random-coefficient characteristic (price enters via its
    /// first-stage prediction).
    DifferentiationLocal,
    /// Sums of own-firm and rival characteristics.
    BlpSums,
    /// First-stage predicted price.
    PredictedPrice,
}

#[derive(Clone, Debug)]
pub struct InstrumentSet {
    pub z_demand: DMatrix<f64>,
    pub z_supply: DMatrix<f64>,
    pub kind: InstrumentKind,
    pub column_names: Vec<String>,
    /// Window half-widths of the differentiation counts, by characteristic.
    pub bandwidths: Vec<(String, f64)>,
    pub dropped: Vec<String>,
}

const COLLINEAR_TOL: f64 = 1e-8;

/// Own-firm and rival counts of products within `bandwidth` of each product.
fn local_counts(m: &MarketData, z: &[f64], bandwidth: f64) -> (Vec<f64>, Vec<f64>) {
    let n = z.len();
    let mut own = vec![0.0; n];
    let mut rival = vec![0.0; n];
    for j in 0..n {
        for k in 0..n {
            if k != j && (z[k] - z[j]).abs() < bandwidth {
                if m.firm_ids[k] == m.firm_ids[j] {
                    own[j] += 1.0;
                } else {
                    rival[j] += 1.0;
                }
            }
        }
    }
    (own, rival)
}

fn own_rival_sums(m: &MarketData, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = z.len();
    let mut own = vec![0.0; n];
    let mut rival = vec![0.0; n];
    for j in 0..n {
        for k in 0..n {
            if k == j {
                continue;
            }
            if m.firm_ids[k] == m.firm_ids[j] {
                own[j] += z[k];
            } else {
                rival[j] += z[k];
            }
        }
    }
    (own, rival)
}

/// Population standard deviation of all within-market pairwise differences, pooled.
fn pairwise_sd(dataset: &Dataset, values: &[Vec<f64>]) -> f64 {
    let (mut sum, mut sum_sq, mut count) = (0.0, 0.0, 0.0);
    for (m, v) in dataset.markets.iter().zip(values) {
        for j in 0..m.n_products() {
            for k in 0..m.n_products() {
                if j != k {
                    let d = v[k] - v[j];
                    sum += d;
                    sum_sq += d * d;
                    count += 1.0;
                }
            }
        }
    }
    if count == 0.0 {
        return 0.0;
    }
    let mean = sum / count;
    (sum_sq / count - mean * mean).max(0.0).sqrt()
}

fn per_market(dataset: &Dataset, stacked: &DVector<f64>) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut r = 0;
    for m in &dataset.markets {
        out.push(stacked.rows(r, m.n_products()).iter().copied().collect());
        r += m.n_products();
    }
    out
}

struct ColumnBuilder {
    columns: Vec<DVector<f64>>,
    names: Vec<String>,
}

impl ColumnBuilder {
    fn push_matrix(&mut self, m: &DMatrix<f64>, prefix: &str) {
        for c in 0..m.ncols() {
            self.columns.push(m.column(c).into_owned());
            self.names.push(format!("{prefix}{c}"));
        }
    }

    fn push(&mut self, v: Vec<Vec<f64>>, name: String) {
        let flat: Vec<f64> = v.into_iter().flatten().collect();
        self.columns.push(DVector::from_vec(flat));
        self.names.push(name);
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_columns(&self.columns)
    }
}

/// Characteristics carrying a random coefficient on the demand side.
fn rc_demand_columns(model: &MixedLogit) -> Vec<usize> {
    model
        .layout()
        .iter()
        .filter_map(|s| match s {
            RcSource::Demand(c) => Some(*c),
            RcSource::Price => None,
        })
        .collect()
}

fn market_column(dataset: &Dataset, col: usize) -> Vec<Vec<f64>> {
    dataset
        .markets
        .iter()
        .map(|m| m.demand_chars.column(col).iter().copied().collect())
        .collect()
}

/// Build demand- and supply-side instruments. Both sides use the same
/// columns: all exogenous characteristics plus the kind-specific block.
/// Linearly dependent columns are dropped left to right and reported.
pub fn build_instruments(
    model: &MixedLogit,
    dataset: &Dataset,
    kind: InstrumentKind,
) -> Result<InstrumentSet> {
    let xs: Vec<&DMatrix<f64>> = dataset.markets.iter().map(|m| &m.demand_chars).collect();
    let ws: Vec<&DMatrix<f64>> = dataset.markets.iter().map(|m| &m.cost_chars).collect();
    let (x, w) = (stack_matrices(&xs), stack_matrices(&ws));
    let mut b = ColumnBuilder {
        columns: Vec::new(),
        names: Vec::new(),
    };
    b.push_matrix(&x, "x");
    b.push_matrix(&w, "w");
    let mut bandwidths = Vec::new();
    let rc_cols = rc_demand_columns(model);
    let price_rc = model.layout().contains(&RcSource::Price);

    let mut add_counts = |b: &mut ColumnBuilder, name: &str, values: &[Vec<f64>]| {
        let bw = pairwise_sd(dataset, values);
        bandwidths.push((name.to_string(), bw));
        let (own, rival): (Vec<_>, Vec<_>) = dataset
            .markets
            .iter()
            .zip(values)
            .map(|(m, v)| local_counts(m, v, bw))
            .unzip();
        b.push(own, format!("own_near_{name}"));
        b.push(rival, format!("rival_near_{name}"));
    };

    match kind {
        InstrumentKind::DifferentiationLocal => {
            for &c in &rc_cols {
                add_counts(&mut b, &format!("x{c}"), &market_column(dataset, c));
            }
            if price_rc {
                let p_hat = predicted_price(&b.matrix(), &dataset.stacked_prices())?;
                add_counts(&mut b, "p_hat", &per_market(dataset, &p_hat));
            }
        }
        InstrumentKind::BlpSums => {
            for c in 0..x.ncols() {
                let col = market_column(dataset, c);
                let (own, rival): (Vec<_>, Vec<_>) = dataset
                    .markets
                    .iter()
                    .zip(&col)
                    .map(|(m, v)| own_rival_sums(m, v))
                    .unzip();
                b.push(own, format!("own_sum_x{c}"));
                b.push(rival, format!("rival_sum_x{c}"));
            }
        }
        InstrumentKind::PredictedPrice => {
            let p_hat = predicted_price(&b.matrix(), &dataset.stacked_prices())?;
            b.push(per_market(dataset, &p_hat), "p_hat".into());
        }
    }

    let z = b.matrix();
    let keep = independent_columns(&z, COLLINEAR_TOL);
    let dropped: Vec<String> = (0..z.ncols())
        .filter(|c| !keep.contains(c))
        .map(|c| b.names[c].clone())
        .collect();
    if !dropped.is_empty() {
        info!("dropped collinear instrument columns: {}", dropped.join(", "));
    }
    let z = select_columns(&z, &keep);
    Ok(InstrumentSet {
        z_demand: z.clone(),
        z_supply: z,
        kind,
        column_names: keep.iter().map(|&c| b.names[c].clone()).collect(),
        bandwidths,
        dropped,
    })
}

/// OLS fitted values of `p` on the independent columns of `exog`.
pub fn predicted_price(exog: &DMatrix<f64>, prices: &DVector<f64>) -> Result<DVector<f64>> {
    let design = select_columns(exog, &independent_columns(exog, COLLINEAR_TOL));
    let coef = ols(&design, prices)
        .ok_or_else(|| Error::InvalidInput("first-stage price regression failed".into()))?;
    Ok(design * coef)
}

/// Stacked moment system: `ĝ(b) = (Zᵀ Y − Zᵀ 𝒳 b) / N` with block-diagonal
/// `Z = diag(Z_d, Z_s)` and `𝒳 = diag(X, W)`.
#[derive(Clone, Debug)]
pub struct MomentSystem {
    pub z_demand: DMatrix<f64>,
    pub z_supply: DMatrix<f64>,
    pub design: LinearDesign,
    /// `Zᵀ𝒳 / N`.
    a: DMatrix<f64>,
}

impl MomentSystem {
    pub fn new(instruments: &InstrumentSet, design: LinearDesign) -> Result<Self> {
        let n = design.n_obs();
        if instruments.z_demand.nrows() != n || instruments.z_supply.nrows() != n {
            return Err(Error::DimensionMismatch {
                what: "instrument rows",
                expected: n,
                actual: instruments.z_demand.nrows(),
            });
        }
        let (ld, ls) = (instruments.z_demand.ncols(), instruments.z_supply.ncols());
        let (kd, ks) = (design.x.ncols(), design.w.ncols());
        let mut a = DMatrix::zeros(ld + ls, kd + ks);
        a.view_mut((0, 0), (ld, kd))
            .copy_from(&(instruments.z_demand.tr_mul(&design.x) / n as f64));
        a.view_mut((ld, kd), (ls, ks))
            .copy_from(&(instruments.z_supply.tr_mul(&design.w) / n as f64));
        Ok(Self {
            z_demand: instruments.z_demand.clone(),
            z_supply: instruments.z_supply.clone(),
            design,
            a,
        })
    }

    pub fn n_moments(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_obs(&self) -> usize {
        self.design.n_obs()
    }

    /// `Zᵀ Y / N`.
    fn zy(&self, demand_lhs: &DVector<f64>, supply_lhs: &DVector<f64>) -> DVector<f64> {
        let nf = self.n_obs() as f64;
        let top = self.z_demand.tr_mul(demand_lhs) / nf;
        let bottom = self.z_supply.tr_mul(supply_lhs) / nf;
        let mut out = DVector::zeros(top.len() + bottom.len());
        out.rows_mut(0, top.len()).copy_from(&top);
        out.rows_mut(top.len(), bottom.len()).copy_from(&bottom);
        out
    }

    /// Block `(ZᵀZ/N)⁻¹` weight.
    pub fn two_stage_weight(&self) -> Result<DMatrix<f64>> {
        let nf = self.n_obs() as f64;
        let (ld, ls) = (self.z_demand.ncols(), self.z_supply.ncols());
        let inv = |z: &DMatrix<f64>| {
            spd_inverse(&(z.tr_mul(z) / nf))
                .ok_or_else(|| Error::InvalidInput("instrument cross-product is singular".into()))
        };
        let mut psi = DMatrix::zeros(ld + ls, ld + ls);
        psi.view_mut((0, 0), (ld, ld)).copy_from(&inv(&self.z_demand)?);
        psi.view_mut((ld, ld), (ls, ls)).copy_from(&inv(&self.z_supply)?);
        Ok(psi)
    }

    /// Per-observation moment contributions `[Z_d,i ξ_i ; Z_s,i u_i]`, one row each.
    pub fn moment_contributions(&self, xi: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let (ld, ls) = (self.z_demand.ncols(), self.z_supply.ncols());
        let mut g = DMatrix::zeros(self.n_obs(), ld + ls);
        for i in 0..self.n_obs() {
            for c in 0..ld {
                g[(i, c)] = self.z_demand[(i, c)] * xi[i];
            }
            for c in 0..ls {
                g[(i, ld + c)] = self.z_supply[(i, c)] * u[i];
            }
        }
        g
    }
}

/// Linear IV-GMM solution at fixed `θ`.
#[derive(Clone, Debug)]
pub struct IvSolution {
    pub beta: DVector<f64>,
    pub gamma: DVector<f64>,
    pub moments: DVector<f64>,
    pub xi: DVector<f64>,
    pub u: DVector<f64>,
}

/// Minimize `ĝᵀΨĝ` over `(β, γ)`: `b = (AᵀΨA)⁻¹ AᵀΨ Zᵀ Y / N`.
pub fn iv_linear_solve(
    system: &MomentSystem,
    demand_lhs: &DVector<f64>,
    supply_lhs: &DVector<f64>,
    weight: &DMatrix<f64>,
) -> Result<IvSolution> {
    let zy = system.zy(demand_lhs, supply_lhs);
    let a = &system.a;
    let at_psi = a.transpose() * weight;
    let b = (&at_psi * a)
        .lu()
        .solve(&(&at_psi * &zy))
        .filter(|b| b.iter().all(|v| v.is_finite()))
        .ok_or(Error::Singular {
            what: "IV normal matrix",
            market: -1,
        })?;
    let kd = system.design.x.ncols();
    let ks = system.design.w.ncols();
    let beta = b.rows(0, kd).into_owned();
    let gamma = b.rows(kd, ks).into_owned();
    let moments = zy - a * &b;
    let xi = demand_lhs - &system.design.x * &beta;
    let u = supply_lhs - &system.design.w * &gamma;
    Ok(IvSolution {
        beta,
        gamma,
        moments,
        xi,
        u,
    })
}

fn objective_from_eval(
    system: &MomentSystem,
    eval: &ThetaEval,
    weight: &DMatrix<f64>,
) -> Result<(f64, IvSolution)> {
    let sol = iv_linear_solve(system, &eval.demand_lhs, &eval.supply_lhs, weight)?;
    let q = sol.moments.dot(&(weight * &sol.moments));
    Ok((q, sol))
}

/// `ĝᵀΨĝ` at `θ` with `(β, γ)` concentrated out.
pub fn gmm_objective(
    model: &MixedLogit,
    dataset: &Dataset,
    system: &MomentSystem,
    theta: &ThetaNonlinear,
    weight: &DMatrix<f64>,
    settings: &LikelihoodSettings,
) -> Result<f64> {
    let eval = evaluate_theta(model, dataset, theta, settings, false, None)?;
    if weight.iter().all(|w| *w == 0.0) {
        return Ok(0.0);
    }
    objective_from_eval(system, &eval, weight).map(|(q, _)| q)
}

/// Uncentered `(1/N) Σ g_i g_iᵀ`, inverted; ridge-regularized when needed.
pub fn robust_weight(system: &MomentSystem, sol: &IvSolution) -> (DMatrix<f64>, Option<f64>) {
    let g = system.moment_contributions(&sol.xi, &sol.u);
    let s = g.tr_mul(&g) / system.n_obs() as f64;
    if let Some(ch) = s.clone().cholesky() {
        return (ch.inverse(), None);
    }
    let lambda = 1e-10 * s.trace();
    warn!("robust weight not positive definite; ridge lambda = {lambda:e}");
    let ridged = &s + DMatrix::identity(s.nrows(), s.ncols()) * lambda;
    let inv = spd_inverse(&ridged).unwrap_or_else(|| DMatrix::identity(s.nrows(), s.ncols()));
    (inv, Some(lambda))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GmmStandardErrors {
    pub names: Vec<String>,
    /// `NaN` where unavailable.
    pub values: Vec<f64>,
    /// Larger than the feasibility threshold, non-finite, or from a
    /// non-invertible bread matrix.
    pub flagged: Vec<bool>,
}

impl GmmStandardErrors {
    pub fn get(&self, name: &str) -> Option<(f64, bool)> {
        let i = self.names.iter().position(|n| n == name)?;
        Some((self.values[i], self.flagged[i]))
    }
}

pub const SE_FEASIBILITY_THRESHOLD: f64 = 1e3;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GmmConfig {
    pub likelihood: LikelihoodSettings,
    pub optimizer: OptimizerSettings,
    pub starts: StartPolicy,
    pub instruments: InstrumentKind,
    pub standard_errors: bool,
    /// Relative step for the finite-difference moment Jacobian.
    pub jacobian_step: f64,
}

impl GmmConfig {
    pub fn new(starts: StartPolicy) -> Self {
        Self {
            likelihood: LikelihoodSettings::default(),
            optimizer: OptimizerSettings::default(),
            starts,
            instruments: InstrumentKind::DifferentiationLocal,
            standard_errors: true,
            jacobian_step: 1e-5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GmmResult {
    pub theta_hat: ThetaNonlinear,
    pub linear_hat: LinearParams,
    /// `N ĝᵀΨ₂ĝ` at the estimate.
    pub objective: f64,
    pub step1_theta: ThetaNonlinear,
    pub step1_objective: f64,
    /// Step-2 objective evaluated at the step-1 estimate.
    pub step2_objective_at_step1: f64,
    pub weight_step1: Vec<Vec<f64>>,
    pub weight_step2: Vec<Vec<f64>>,
    pub weight_condition_numbers: (f64, f64),
    pub ridge_lambda: Option<f64>,
    pub standard_errors: Option<GmmStandardErrors>,
    pub instrument_columns: Vec<String>,
    pub dropped_instruments: Vec<String>,
    pub starts: Vec<StartRecord>,
    pub converged: bool,
    pub failed_evaluations: usize,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

struct StepOutcome {
    x: Vec<f64>,
    objective: f64,
    converged: bool,
}

fn run_step(
    model: &MixedLogit,
    dataset: &Dataset,
    system: &MomentSystem,
    weight: &DMatrix<f64>,
    config: &GmmConfig,
    starts: &[Vec<f64>],
    warm: &WarmStarts,
    failures: &std::sync::atomic::AtomicUsize,
    records: &mut Vec<StartRecord>,
) -> Option<StepOutcome> {
    let nf = system.n_obs() as f64;
    let objective = |x: &[f64]| -> f64 {
        let theta = ThetaNonlinear::from_slice(x);
        let value = evaluate_theta(model, dataset, &theta, &config.likelihood, false, Some(warm))
            .and_then(|ev| objective_from_eval(system, &ev, weight));
        match value {
            Ok((q, _)) => nf * q,
            Err(e) => {
                failures.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                debug!("GMM evaluation failed at {x:?}: {e}");
                f64::INFINITY
            }
        }
    };
    let bounds = theta_bounds(model.k_rc());
    let mut best: Option<StepOutcome> = None;
    for start in starts {
        let r = minimize(&objective, start, &bounds, &config.optimizer);
        records.push(StartRecord {
            initial: start.clone(),
            optimum: r.as_ref().map(|r| r.x.clone()),
            objective: r.as_ref().map(|r| r.f),
            converged: r.as_ref().is_some_and(|r| r.converged),
            iterations: r.as_ref().map_or(0, |r| r.iterations),
            evaluations: r.as_ref().map_or(1, |r| r.evaluations),
            error: r.is_none().then(|| "objective not finite at the starting point".into()),
        });
        if let Some(r) = r {
            if best.as_ref().map_or(true, |b| r.f < b.objective) {
                best = Some(StepOutcome {
                    x: r.x,
                    objective: r.f,
                    converged: r.converged,
                });
            }
        }
    }
    best
}

/// Two-step GMM: 2SLS-weighted first step from each start, then the robust
/// weight evaluated at the first-step estimate, re-optimized from there.
pub fn two_step_estimate(
    model: &MixedLogit,
    dataset: &Dataset,
    instruments: &InstrumentSet,
    config: &GmmConfig,
) -> Result<GmmResult> {
    let design = LinearDesign::from_dataset(dataset)?;
    let system = MomentSystem::new(instruments, design)?;
    let nf = system.n_obs() as f64;
    let warm = WarmStarts::new();
    let failures = std::sync::atomic::AtomicUsize::new(0);
    let mut records = Vec::new();
    let settings = &config.likelihood;

    let w1 = system.two_stage_weight()?;
    let starts = config.starts.points(&theta_bounds(model.k_rc()));
    let step1 = run_step(model, dataset, &system, &w1, config, &starts, &warm, &failures, &mut records)
        .ok_or_else(|| Error::AllStartsFailed {
            starts: starts.len(),
            diagnostics: "GMM objective not finite at any start".into(),
        })?;
    let theta1 = ThetaNonlinear::from_slice(&step1.x);
    let eval1 = evaluate_theta(model, dataset, &theta1, settings, false, Some(&warm))?;
    let (_, sol1) = objective_from_eval(&system, &eval1, &w1)?;
    let (w2, ridge_lambda) = robust_weight(&system, &sol1);
    let (q2_at_1, _) = objective_from_eval(&system, &eval1, &w2)?;

    let step2 = run_step(
        model,
        dataset,
        &system,
        &w2,
        config,
        std::slice::from_ref(&step1.x),
        &warm,
        &failures,
        &mut records,
    )
    .ok_or_else(|| Error::AllStartsFailed {
        starts: 1,
        diagnostics: "second-step objective not finite at the first-step estimate".into(),
    })?;
    let theta_hat = ThetaNonlinear::from_slice(&step2.x);
    let eval = evaluate_theta(model, dataset, &theta_hat, settings, false, Some(&warm))?;
    let (q, sol) = objective_from_eval(&system, &eval, &w2)?;

    let standard_errors = if config.standard_errors {
        Some(sandwich_standard_errors(
            model, dataset, &system, &theta_hat, &sol, &w2, config, &warm,
        )?)
    } else {
        None
    };
    Ok(GmmResult {
        linear_hat: LinearParams::new(sol.beta.iter().copied().collect(), sol.gamma.iter().copied().collect()),
        theta_hat,
        objective: nf * q,
        step1_theta: theta1,
        step1_objective: step1.objective,
        step2_objective_at_step1: nf * q2_at_1,
        weight_condition_numbers: (condition_number(&w1), condition_number(&w2)),
        weight_step1: to_rows(&w1),
        weight_step2: to_rows(&w2),
        ridge_lambda,
        standard_errors,
        instrument_columns: instruments.column_names.clone(),
        dropped_instruments: instruments.dropped.clone(),
        starts: records,
        converged: step1.converged && step2.converged,
        failed_evaluations: failures.into_inner(),
    })
}

/// `V = (GᵀΨG)⁻¹ GᵀΨ S Ψ G (GᵀΨG)⁻¹ / N` over `(θ, β, γ)`, with the `θ`
/// columns of `G = ∂ĝ/∂Θ` by central differences and the linear columns
/// analytic.
#[allow(clippy::too_many_arguments)]
fn sandwich_standard_errors(
    model: &MixedLogit,
    dataset: &Dataset,
    system: &MomentSystem,
    theta: &ThetaNonlinear,
    sol: &IvSolution,
    weight: &DMatrix<f64>,
    config: &GmmConfig,
    warm: &WarmStarts,
) -> Result<GmmStandardErrors> {
    let k_theta = theta.len();
    let (kd, ks) = (system.design.x.ncols(), system.design.w.ncols());
    let mut names = vec!["alpha".to_string()];
    names.extend((0..model.k_rc()).map(|k| format!("sigma_{k}")));
    names.extend((0..kd).map(|k| format!("beta_{k}")));
    names.extend((0..ks).map(|k| format!("gamma_{k}")));
    let p = names.len();
    let l = system.n_moments();

    let mut g = DMatrix::zeros(l, p);
    let x0 = theta.to_vec();
    for i in 0..k_theta {
        let h = config.jacobian_step * x0[i].abs().max(1.0);
        let zy_at = |d: f64| -> Result<DVector<f64>> {
            let mut x = x0.clone();
            x[i] += d;
            let mut th = ThetaNonlinear::from_slice(&x);
            // shares are even in each σ
            th.sigma.iter_mut().for_each(|s| *s = s.abs());
            let ev = evaluate_theta(model, dataset, &th, &config.likelihood, false, Some(warm))?;
            Ok(system.zy(&ev.demand_lhs, &ev.supply_lhs))
        };
        let col = (zy_at(h)? - zy_at(-h)?) / (2.0 * h);
        g.set_column(i, &col);
    }
    g.view_mut((0, k_theta), (l, kd + ks)).copy_from(&(-&system.a));

    let contributions = system.moment_contributions(&sol.xi, &sol.u);
    let s = contributions.tr_mul(&contributions) / system.n_obs() as f64;
    let gt_psi = g.transpose() * weight;
    let bread = (&gt_psi * &g).try_inverse();
    let values: Vec<f64> = match bread {
        Some(b) if b.iter().all(|v| v.is_finite()) => {
            let meat = &gt_psi * &s * gt_psi.transpose();
            let v = &b * meat * &b / system.n_obs() as f64;
            (0..p).map(|k| v[(k, k)].sqrt()).collect()
        }
        _ => vec![f64::NAN; p],
    };
    let flagged = values
        .iter()
        .map(|v| !v.is_finite() || *v > SE_FEASIBILITY_THRESHOLD)
        .collect();
    Ok(GmmStandardErrors {
        names,
        values,
        flagged,
    })
}
