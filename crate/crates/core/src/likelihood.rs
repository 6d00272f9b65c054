//! Full-information maximum likelihood.
//!
//! Demand and cost shocks `(ξ, u)` are jointly normal. The data density
//! follows by changing variables from `(δ̃, c)` to `(s, p)`, where
//! `δ̃ = Xβ + ξ` is mean utility net of the price term. The Jacobian of that
//! map comes from the implicit function theorem applied to the pricing
//! first-order conditions `F(δ̃, p, c) = s + (O∘J_sp)(p − c) = 0`:
//!
//! ```text
//! J_Fp = J_spᵀ + O∘J_sp + Ξ_pp      J_Fδ = J_sδᵀ + Ξ_pδ      J_Fc = −O∘J_sp
//! [dp/dδ̃ | dp/dc] = −J_Fp⁻¹ [J_Fδ | J_Fc]
//! ds/dδ̃ = J_sδᵀ + J_spᵀ dp/dδ̃       ds/dc = J_spᵀ dp/dc
//! ```
//!
//! Blocks here use the row-equation convention `J_F[j, l] = ∂F_j/∂x_l`.
//! Given `θ`, the linear parameters and `Σ` are concentrated out by
//! alternating least squares, leaving
//! `ℓ(θ) = −(N/2) log|Σ*(θ)| − Σ_t log|det J_t(θ)|`.

use std::collections::HashMap;
use std::sync::Mutex;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{OwnershipMode, SupplyForm};
use crate::error::{Error, Result};
use crate::inversion::{invert_with_kernel, recover_costs_with, InversionSettings};
use crate::linalg::log_abs_det;
use crate::model::{
    stack_matrices, stack_vectors, CovMatrix, Dataset, LinearParams, MarketData, MarketKernel,
    MixedLogit, NodeShares, ThetaNonlinear,
};
use crate::optimize::{draw_starts, fd_hessian_with_steps, minimize, Bounds, OptimizerSettings};

/// Derivatives of the pricing first-order conditions.
#[derive(Clone, Debug)]
pub struct FocBlocks {
    pub j_fp: DMatrix<f64>,
    pub j_fdelta: DMatrix<f64>,
    pub j_fc: DMatrix<f64>,
}

/// FOC blocks from a kernel evaluated at the market's prices.
pub fn foc_blocks_at(
    kernel: &MarketKernel,
    ns: &NodeShares,
    markups: &DVector<f64>,
    ownership: &DMatrix<f64>,
) -> FocBlocks {
    let j_sp = kernel.j_sp(ns);
    let j_sdelta = kernel.j_sdelta(ns);
    let (xi_pp, xi_pdelta) = kernel.markup_contracted_hessians(ns, markups, ownership);
    let o_jsp = ownership.component_mul(&j_sp);
    FocBlocks {
        j_fp: j_sp.transpose() + &o_jsp + xi_pp,
        j_fdelta: j_sdelta.transpose() + xi_pdelta,
        j_fc: -o_jsp,
    }
}

/// FOC blocks at mean utility `delta` (price term included) and costs `costs`.
pub fn foc_derivative_blocks(
    model: &MixedLogit,
    market: &MarketData,
    theta: &ThetaNonlinear,
    delta: &DVector<f64>,
    costs: &DVector<f64>,
    ownership: &DMatrix<f64>,
) -> Result<FocBlocks> {
    let kernel = model.kernel(market, theta)?;
    let ns = kernel.node_shares(delta);
    Ok(foc_blocks_at(&kernel, &ns, &(&market.prices - costs), ownership))
}

/// `(dp/dδ̃, dp/dc)` from one LU factorization of `J_Fp`.
pub fn price_total_derivatives(blocks: &FocBlocks) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = blocks.j_fp.nrows();
    let mut rhs = DMatrix::zeros(n, 2 * n);
    rhs.columns_mut(0, n).copy_from(&blocks.j_fdelta);
    rhs.columns_mut(n, n).copy_from(&blocks.j_fc);
    let sol = blocks
        .j_fp
        .clone()
        .lu()
        .solve(&rhs)
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .ok_or(Error::Singular {
            what: "FOC price Jacobian",
            market: -1,
        })?;
    let sol = -sol;
    Ok((sol.columns(0, n).into_owned(), sol.columns(n, n).into_owned()))
}

#[derive(Clone, Debug)]
pub struct MarketJacobian {
    pub j_fp: DMatrix<f64>,
    pub j_fdelta: DMatrix<f64>,
    pub j_fc: DMatrix<f64>,
    pub dp_ddelta: DMatrix<f64>,
    pub dp_dc: DMatrix<f64>,
    pub ds_ddelta: DMatrix<f64>,
    pub ds_dc: DMatrix<f64>,
    /// `log|det|` of the stacked matrix.
    pub logabsdet: f64,
    /// Sign of the determinant.
    pub sign: f64,
}

impl MarketJacobian {
    /// `[[ds/dδ̃, ds/dc], [dp/dδ̃, dp/dc]]`.
    pub fn stacked(&self) -> DMatrix<f64> {
        stack_blocks(&self.ds_ddelta, &self.ds_dc, &self.dp_ddelta, &self.dp_dc)
    }
}

fn stack_blocks(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = a.nrows();
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(a);
    m.view_mut((0, n), (n, n)).copy_from(b);
    m.view_mut((n, 0), (n, n)).copy_from(c);
    m.view_mut((n, n), (n, n)).copy_from(d);
    m
}

pub fn assemble_market_jacobian(
    model: &MixedLogit,
    market: &MarketData,
    theta: &ThetaNonlinear,
    delta: &DVector<f64>,
    costs: &DVector<f64>,
    ownership: &DMatrix<f64>,
) -> Result<MarketJacobian> {
    let kernel = model.kernel(market, theta)?;
    let ns = kernel.node_shares(delta);
    jacobian_with(&kernel, &ns, market, costs, ownership)
}

fn jacobian_with(
    kernel: &MarketKernel,
    ns: &NodeShares,
    market: &MarketData,
    costs: &DVector<f64>,
    ownership: &DMatrix<f64>,
) -> Result<MarketJacobian> {
    let blocks = foc_blocks_at(kernel, ns, &(&market.prices - costs), ownership);
    let (dp_ddelta, dp_dc) =
        price_total_derivatives(&blocks).map_err(|_| Error::Singular {
            what: "FOC price Jacobian",
            market: market.market_id,
        })?;
    let jsp_t = kernel.j_sp(ns).transpose();
    let ds_ddelta = kernel.j_sdelta(ns).transpose() + &jsp_t * &dp_ddelta;
    let ds_dc = &jsp_t * &dp_dc;
    let (logabsdet, sign) = log_abs_det(&stack_blocks(&ds_ddelta, &ds_dc, &dp_ddelta, &dp_dc));
    if sign == 0.0 || !logabsdet.is_finite() {
        return Err(Error::Singular {
            what: "share-price Jacobian",
            market: market.market_id,
        });
    }
    Ok(MarketJacobian {
        j_fp: blocks.j_fp,
        j_fdelta: blocks.j_fdelta,
        j_fc: blocks.j_fc,
        dp_ddelta,
        dp_dc,
        ds_ddelta,
        ds_dc,
        logabsdet,
        sign,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodSettings {
    pub inversion: InversionSettings,
    pub supply_form: SupplyForm,
    pub ownership: OwnershipMode,
    pub als_tol: f64,
    pub als_max_iters: usize,
    /// Under log-linear costs, add `Σ ln c` so the Jacobian term maps
    /// `(δ, ln c)` rather than `(δ, c)` to `(s, p)`.
    pub log_cost_jacobian: bool,
}

impl Default for LikelihoodSettings {
    fn default() -> Self {
        Self {
            inversion: InversionSettings::default(),
            supply_form: SupplyForm::Linear,
            ownership: OwnershipMode::True,
            als_tol: 1e-12,
            als_max_iters: 10_000,
            log_cost_jacobian: false,
        }
    }
}

/// Per-market quantities implied by `θ`.
#[derive(Clone, Debug)]
pub struct MarketEval {
    /// Mean utility including `α·p`.
    pub delta: DVector<f64>,
    pub costs: DVector<f64>,
    /// `log|det J|`, plus `Σ ln c` under log-linear costs. Zero when the
    /// Jacobian was not requested.
    pub logabsdet: f64,
    pub sign: f64,
}

/// Stacked data implied by `θ`: the left-hand sides of the two linear
/// equations `δ̃ = Xβ + ξ` and `c = Wγ + u` (or `ln c`).
#[derive(Clone, Debug)]
pub struct ThetaEval {
    pub markets: Vec<MarketEval>,
    pub demand_lhs: DVector<f64>,
    pub supply_lhs: DVector<f64>,
}

impl ThetaEval {
    pub fn jacobian_sum(&self) -> f64 {
        self.markets.iter().map(|m| m.logabsdet).sum()
    }
}

/// Last converged mean utilities per market, reused as inversion starts.
#[derive(Debug, Default)]
pub struct WarmStarts {
    deltas: Mutex<HashMap<usize, DVector<f64>>>,
}

impl WarmStarts {
    pub fn new() -> Self {
        Self::default()
    }

    fn get(&self, t: usize) -> Option<DVector<f64>> {
        self.deltas.lock().ok()?.get(&t).cloned()
    }

    fn put(&self, t: usize, delta: &DVector<f64>) {
        if let Ok(mut m) = self.deltas.lock() {
            m.insert(t, delta.clone());
        }
    }
}

fn evaluate_market(
    model: &MixedLogit,
    market: &MarketData,
    theta: &ThetaNonlinear,
    settings: &LikelihoodSettings,
    with_jacobian: bool,
    start: Option<&DVector<f64>>,
) -> Result<MarketEval> {
    let kernel = model.kernel(market, theta)?;
    let (delta, _) = invert_with_kernel(&kernel, &market.shares, start, &settings.inversion)?;
    let ns = kernel.node_shares(&delta);
    let ownership = settings.ownership.matrix(market);
    let costs = recover_costs_with(&kernel, &ns, market, &ownership)?;
    if market.prices.iter().zip(costs.iter()).any(|(p, c)| p - c <= 0.0) {
        return Err(Error::InvalidInput("non-positive implied markup".into()));
    }
    let (mut logabsdet, mut sign) = (0.0, 1.0);
    if with_jacobian {
        let jac = jacobian_with(&kernel, &ns, market, &costs, &ownership)?;
        logabsdet = jac.logabsdet;
        sign = jac.sign;
    }
    if settings.supply_form == SupplyForm::LogLinear {
        if costs.iter().any(|c| *c <= 0.0) {
            return Err(Error::InvalidInput(
                "non-positive implied cost under log-linear costs".into(),
            ));
        }
        if with_jacobian && settings.log_cost_jacobian {
            logabsdet += costs.iter().map(|c| c.ln()).sum::<f64>();
        }
    }
    Ok(MarketEval {
        delta,
        costs,
        logabsdet,
        sign,
    })
}

/// Invert shares, recover costs, and optionally compute the Jacobian term in
/// every market. Markets run in parallel; results keep market order.
pub fn evaluate_theta(
    model: &MixedLogit,
    dataset: &Dataset,
    theta: &ThetaNonlinear,
    settings: &LikelihoodSettings,
    with_jacobian: bool,
    warm: Option<&WarmStarts>,
) -> Result<ThetaEval> {
    theta.validate(model.k_rc())?;
    let markets: Vec<MarketEval> = dataset
        .markets
        .par_iter()
        .enumerate()
        .map(|(t, m)| {
            let start = warm.and_then(|w| w.get(t));
            let ev = evaluate_market(model, m, theta, settings, with_jacobian, start.as_ref())
                .map_err(|e| e.in_market(m.market_id))?;
            if let Some(w) = warm {
                w.put(t, &ev.delta);
            }
            Ok(ev)
        })
        .collect::<Result<_>>()?;
    let demand: Vec<DVector<f64>> = markets
        .iter()
        .zip(&dataset.markets)
        .map(|(ev, m)| &ev.delta - &m.prices * theta.alpha)
        .collect();
    let supply: Vec<DVector<f64>> = markets
        .iter()
        .map(|ev| match settings.supply_form {
            SupplyForm::Linear => ev.costs.clone(),
            SupplyForm::LogLinear => ev.costs.map(f64::ln),
        })
        .collect();
    Ok(ThetaEval {
        markets,
        demand_lhs: stack_vectors(&demand.iter().collect::<Vec<_>>()),
        supply_lhs: stack_vectors(&supply.iter().collect::<Vec<_>>()),
    })
}

/// Stacked exogenous regressors.
#[derive(Clone, Debug)]
pub struct LinearDesign {
    pub x: DMatrix<f64>,
    pub w: DMatrix<f64>,
    xtx: DMatrix<f64>,
    wtw: DMatrix<f64>,
}

impl LinearDesign {
    pub fn new(x: DMatrix<f64>, w: DMatrix<f64>) -> Result<Self> {
        let xtx = x.tr_mul(&x);
        let wtw = w.tr_mul(&w);
        if xtx.clone().cholesky().is_none() || wtw.clone().cholesky().is_none() {
            return Err(Error::InvalidInput(
                "characteristic matrices must have full column rank".into(),
            ));
        }
        Ok(Self { x, w, xtx, wtw })
    }

    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        let xs: Vec<&DMatrix<f64>> = dataset.markets.iter().map(|m| &m.demand_chars).collect();
        let ws: Vec<&DMatrix<f64>> = dataset.markets.iter().map(|m| &m.cost_chars).collect();
        Self::new(stack_matrices(&xs), stack_matrices(&ws))
    }

    pub fn n_obs(&self) -> usize {
        self.x.nrows()
    }
}

/// Outcome of concentrating out `(β, γ, Σ)` at fixed `θ`.
#[derive(Clone, Debug)]
pub struct LinearFit {
    pub beta: DVector<f64>,
    pub gamma: DVector<f64>,
    /// Residual covariance normalized by the observation count.
    pub sigma: CovMatrix,
    pub xi: DVector<f64>,
    pub u: DVector<f64>,
    pub iterations: usize,
    /// `log det` of the residual cross-product matrix after each sweep.
    pub log_det_trace: Vec<f64>,
}

impl LinearFit {
    pub fn linear_params(&self) -> LinearParams {
        LinearParams::new(self.beta.iter().copied().collect(), self.gamma.iter().copied().collect())
    }
}

/// Coefficients on `a` from regressing `y` on `[a | z]`, using the cached
/// Gram matrix `aᵀa`; `z` is one extra column.
fn partial_ols(
    a: &DMatrix<f64>,
    ata: &DMatrix<f64>,
    y: &DVector<f64>,
    z: &DVector<f64>,
) -> Option<DVector<f64>> {
    let k = a.ncols();
    let mut g = DMatrix::zeros(k + 1, k + 1);
    g.view_mut((0, 0), (k, k)).copy_from(ata);
    let atz = a.tr_mul(z);
    for i in 0..k {
        g[(i, k)] = atz[i];
        g[(k, i)] = atz[i];
    }
    g[(k, k)] = z.dot(z);
    let mut rhs = DVector::zeros(k + 1);
    rhs.rows_mut(0, k).copy_from(&a.tr_mul(y));
    rhs[k] = z.dot(y);
    let sol = match g.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        // z lies in the span of a: nothing to partial out
        None => ata.clone().cholesky()?.solve(&a.tr_mul(y)).insert_row(k, 0.0),
    };
    Some(sol.rows(0, k).into_owned())
}

fn cross_products(xi: &DVector<f64>, u: &DVector<f64>) -> (f64, f64, f64) {
    (xi.dot(xi), u.dot(u), xi.dot(u))
}

/// Minimize `log det` of the residual cross-product matrix over `(β, γ)` by
/// alternating the two partial regressions until no coefficient moves by
/// more than `tol`.
pub fn concentrate_linear(
    demand_lhs: &DVector<f64>,
    supply_lhs: &DVector<f64>,
    design: &LinearDesign,
    tol: f64,
    max_iters: usize,
) -> Result<LinearFit> {
    let (x, w) = (&design.x, &design.w);
    let n = x.nrows();
    if demand_lhs.len() != n || supply_lhs.len() != n {
        return Err(Error::DimensionMismatch {
            what: "stacked observations",
            expected: n,
            actual: demand_lhs.len(),
        });
    }
    let rank_err = || Error::InvalidInput("rank-deficient design in concentration step".into());
    let mut gamma = design
        .wtw
        .clone()
        .cholesky()
        .ok_or_else(rank_err)?
        .solve(&w.tr_mul(supply_lhs));
    let mut beta = DVector::zeros(x.ncols());
    let mut trace = Vec::new();
    let mut last = (beta.clone(), gamma.clone());
    for it in 1..=max_iters {
        let u = supply_lhs - w * &gamma;
        let beta_new = partial_ols(x, &design.xtx, demand_lhs, &u).ok_or_else(rank_err)?;
        let xi = demand_lhs - x * &beta_new;
        let gamma_new = partial_ols(w, &design.wtw, supply_lhs, &xi).ok_or_else(rank_err)?;
        let u = supply_lhs - w * &gamma_new;
        let (a, b, c) = cross_products(&xi, &u);
        trace.push((a * b - c * c).ln());
        let change = (&beta_new - &beta).amax().max((&gamma_new - &gamma).amax());
        last = (beta.clone(), gamma.clone());
        beta = beta_new;
        gamma = gamma_new;
        if !change.is_finite() {
            return Err(Error::NonFinite("alternating least squares"));
        }
        if change <= tol {
            let xi = demand_lhs - x * &beta;
            let (a, b, c) = cross_products(&xi, &u);
            let nf = n as f64;
            return Ok(LinearFit {
                beta,
                gamma,
                sigma: CovMatrix {
                    sigma_xi_sq: a / nf,
                    sigma_u_sq: b / nf,
                    sigma_xi_u: c / nf,
                },
                xi,
                u,
                iterations: it,
                log_det_trace: trace,
            });
        }
    }
    debug!("ALS stalled; last two iterates {:?} and {:?}", last, (&beta, &gamma));
    Err(Error::NoConvergence {
        what: "alternating least squares",
        iterations: max_iters,
        residual: (&beta - &last.0).amax().max((&gamma - &last.1).amax()),
    })
}

/// Max-abs residuals of the two first-order conditions of the determinant
/// objective, on moments normalized by `N`:
/// `(Xᵀξ)(uᵀu) − (Xᵀu)(uᵀξ)` and `(Wᵀu)(ξᵀξ) − (Wᵀξ)(ξᵀu)`.
pub fn als_normal_residuals(fit: &LinearFit, design: &LinearDesign) -> (f64, f64) {
    let nf = design.n_obs() as f64;
    let (xi, u) = (&fit.xi, &fit.u);
    let (a, b, c) = cross_products(xi, u);
    let (a, b, c) = (a / nf, b / nf, c / nf);
    let r_beta = design.x.tr_mul(xi) / nf * b - design.x.tr_mul(u) / nf * c;
    let r_gamma = design.w.tr_mul(u) / nf * a - design.w.tr_mul(xi) / nf * c;
    (r_beta.amax(), r_gamma.amax())
}

#[derive(Clone, Debug)]
pub struct LoglikValue {
    pub total: f64,
    /// `−(N/2) log|Σ*|`.
    pub covariance_term: f64,
    /// `−Σ_t log|det J_t|`.
    pub jacobian_term: f64,
    pub fit: LinearFit,
}

fn concentrated_from_eval(
    eval: &ThetaEval,
    design: &LinearDesign,
    settings: &LikelihoodSettings,
) -> Result<LoglikValue> {
    let fit = concentrate_linear(
        &eval.demand_lhs,
        &eval.supply_lhs,
        design,
        settings.als_tol,
        settings.als_max_iters,
    )?;
    let det = fit.sigma.determinant();
    if !(det > 0.0) {
        return Err(Error::NonFinite("residual covariance determinant"));
    }
    let covariance_term = -(design.n_obs() as f64) / 2.0 * det.ln();
    let jacobian_term = -eval.jacobian_sum();
    Ok(LoglikValue {
        total: covariance_term + jacobian_term,
        covariance_term,
        jacobian_term,
        fit,
    })
}

/// Concentrated log-likelihood `−(N/2) log|Σ*(θ)| − Σ_t log|det J_t(θ)|`.
pub fn concentrated_loglik(
    model: &MixedLogit,
    dataset: &Dataset,
    theta: &ThetaNonlinear,
    settings: &LikelihoodSettings,
) -> Result<LoglikValue> {
    let design = LinearDesign::from_dataset(dataset)?;
    let eval = evaluate_theta(model, dataset, theta, settings, true, None)?;
    concentrated_from_eval(&eval, &design, settings)
}

/// Every parameter of the likelihood.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullParams {
    pub theta: ThetaNonlinear,
    pub linear: LinearParams,
    pub sigma: CovMatrix,
}

/// Per-market unconcentrated log-likelihoods
/// `−(N_t/2) log|Σ| − ½ Σ_j r_jᵀ Σ⁻¹ r_j − log|det J_t| − N_t log 2π`.
fn unconcentrated_markets(
    eval: &ThetaEval,
    design: &LinearDesign,
    linear: &LinearParams,
    sigma: &CovMatrix,
) -> Vec<f64> {
    let xi = &eval.demand_lhs - &design.x * linear.beta_vec();
    let u = &eval.supply_lhs - &design.w * linear.gamma_vec();
    let det = sigma.determinant();
    let log_det = if det > 0.0 { det.ln() } else { f64::NAN };
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut offset = 0;
    eval.markets
        .iter()
        .map(|m| {
            let n_t = m.delta.len();
            let quad: f64 = (offset..offset + n_t)
                .map(|j| sigma.quadratic_form(xi[j], u[j]))
                .sum();
            offset += n_t;
            let nf = n_t as f64;
            -nf / 2.0 * log_det - 0.5 * quad - m.logabsdet - nf * ln_2pi
        })
        .collect()
}

/// Unconcentrated log-likelihood summed over markets.
pub fn unconcentrated_loglik(
    model: &MixedLogit,
    dataset: &Dataset,
    params: &FullParams,
    settings: &LikelihoodSettings,
) -> Result<f64> {
    let design = LinearDesign::from_dataset(dataset)?;
    let eval = evaluate_theta(model, dataset, &params.theta, settings, true, None)?;
    Ok(unconcentrated_markets(&eval, &design, &params.linear, &params.sigma).iter().sum())
}

/// `Σ_j r_jᵀ Σ̂⁻¹ r_j` at the unnormalized cross-product matrix `Σ̂ = Σ_j r_j r_jᵀ`.
pub fn unnormalized_quadratic_form(xi: &DVector<f64>, u: &DVector<f64>) -> f64 {
    let (a, b, c) = cross_products(xi, u);
    let s = CovMatrix {
        sigma_xi_sq: a,
        sigma_u_sq: b,
        sigma_xi_u: c,
    };
    (0..xi.len()).map(|j| s.quadratic_form(xi[j], u[j])).sum()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StandardErrors {
    pub names: Vec<String>,
    /// `None` when the information matrix is not positive definite.
    pub values: Option<Vec<f64>>,
    pub min_information_eigenvalue: f64,
}

impl StandardErrors {
    pub fn get(&self, name: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == name)?;
        self.values.as_ref().map(|v| v[i])
    }
}

/// Names of the stacked parameters, in Hessian order.
pub fn parameter_names(k_rc: usize, k_d: usize, k_s: usize, include_theta: bool) -> Vec<String> {
    let mut names = Vec::new();
    if include_theta {
        names.push("alpha".to_string());
        names.extend((0..k_rc).map(|k| format!("sigma_{k}")));
    }
    names.extend((0..k_d).map(|k| format!("beta_{k}")));
    names.extend((0..k_s).map(|k| format!("gamma_{k}")));
    names.extend(["sigma_xi_sq", "sigma_u_sq", "sigma_xi_u"].map(String::from));
    names
}

/// Fisher-information standard errors from a central finite-difference
/// Hessian of the unconcentrated log-likelihood over `(θ, β, γ, Σ)`, with
/// `Î = −(1/T) Σ_t H_t` and `SE_k = sqrt([Î⁻¹]_kk / T)`. With
/// `include_theta = false` the nonlinear parameters are held fixed.
pub fn fisher_standard_errors(
    model: &MixedLogit,
    dataset: &Dataset,
    params: &FullParams,
    settings: &LikelihoodSettings,
    include_theta: bool,
    rel_step: f64,
) -> Result<StandardErrors> {
    let design = LinearDesign::from_dataset(dataset)?;
    let k_rc = model.k_rc();
    let (k_d, k_s) = (dataset.k_demand(), dataset.k_cost());
    let names = parameter_names(k_rc, k_d, k_s, include_theta);
    let k_theta = if include_theta { 1 + k_rc } else { 0 };

    let mut x0 = Vec::with_capacity(names.len());
    if include_theta {
        x0.extend(params.theta.to_vec());
    }
    x0.extend(&params.linear.beta);
    x0.extend(&params.linear.gamma);
    x0.extend(params.sigma.to_array());

    let warm = WarmStarts::new();
    let mut cache: HashMap<Vec<u64>, Option<ThetaEval>> = HashMap::new();
    let base_eval = evaluate_theta(model, dataset, &params.theta, settings, true, Some(&warm))?;
    let t_markets = dataset.markets.len() as f64;

    let mut objective = |x: &[f64]| -> f64 {
        let eval = if include_theta {
            let key: Vec<u64> = x[..k_theta].iter().map(|v| v.to_bits()).collect();
            let entry = cache.entry(key).or_insert_with(|| {
                // shares are even in each σ, so a step across zero is harmless
                let mut theta = ThetaNonlinear::from_slice(&x[..k_theta]);
                theta.sigma.iter_mut().for_each(|s| *s = s.abs());
                evaluate_theta(model, dataset, &theta, settings, true, Some(&warm)).ok()
            });
            match entry {
                Some(e) => e as &ThetaEval,
                None => return f64::NAN,
            }
        } else {
            &base_eval
        };
        let rest = &x[k_theta..];
        let linear = LinearParams::new(rest[..k_d].to_vec(), rest[k_d..k_d + k_s].to_vec());
        let s = &rest[k_d + k_s..];
        let sigma = CovMatrix {
            sigma_xi_sq: s[0],
            sigma_u_sq: s[1],
            sigma_xi_u: s[2],
        };
        unconcentrated_markets(eval, &design, &linear, &sigma).iter().sum()
    };
    // covariance entries step on their own scale
    let sigma_scale = (params.sigma.sigma_xi_sq * params.sigma.sigma_u_sq).sqrt();
    let n_params = x0.len();
    let steps: Vec<f64> = x0
        .iter()
        .enumerate()
        .map(|(k, v)| {
            if k >= n_params - 3 {
                rel_step * sigma_scale
            } else {
                rel_step * v.abs().max(1.0)
            }
        })
        .collect();
    let hessian = fd_hessian_with_steps(&mut objective, &x0, &steps);
    let information = -(&hessian) / t_markets;
    let min_eig = information.clone().symmetric_eigen().eigenvalues.min();
    let values = if hessian.iter().all(|v| v.is_finite()) && min_eig > 0.0 {
        information
            .cholesky()
            .map(|ch| ch.inverse())
            .map(|inv| (0..names.len()).map(|k| (inv[(k, k)] / t_markets).sqrt()).collect())
    } else {
        None
    };
    if values.is_none() {
        warn!("information matrix not positive definite (min eigenvalue {min_eig:e})");
    }
    Ok(StandardErrors {
        names,
        values,
        min_information_eigenvalue: min_eig,
    })
}

/// How optimizer starting points are chosen.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StartPolicy {
    pub center: Vec<f64>,
    pub n_random: usize,
    pub relative_range: f64,
    pub floor: f64,
    /// Also start at `center` itself.
    pub include_center: bool,
    pub seed: u64,
}

impl StartPolicy {
    pub fn around(center: &ThetaNonlinear, seed: u64) -> Self {
        Self {
            center: center.to_vec(),
            n_random: 3,
            relative_range: 0.5,
            floor: 0.05,
            include_center: false,
            seed,
        }
    }

    pub fn points(&self, bounds: &Bounds) -> Vec<Vec<f64>> {
        let mut pts = draw_starts(
            &self.center,
            self.n_random,
            self.relative_range,
            self.floor,
            bounds,
            self.seed,
        );
        if self.include_center {
            pts.push(self.center.clone());
        }
        pts
    }
}

/// Lower bounds for `[α, σ...]`: α free, σ ≥ 0.
pub fn theta_bounds(k_rc: usize) -> Bounds {
    let mut lower = vec![0.0; 1 + k_rc];
    lower[0] = f64::NEG_INFINITY;
    Bounds { lower }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StartRecord {
    pub initial: Vec<f64>,
    pub optimum: Option<Vec<f64>>,
    pub objective: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MleConfig {
    pub likelihood: LikelihoodSettings,
    pub optimizer: OptimizerSettings,
    pub starts: StartPolicy,
    pub standard_errors: bool,
    /// Relative step of the Fisher finite-difference Hessian.
    pub se_step: f64,
}

impl MleConfig {
    pub fn new(starts: StartPolicy) -> Self {
        Self {
            likelihood: LikelihoodSettings::default(),
            optimizer: OptimizerSettings::default(),
            starts,
            standard_errors: true,
            se_step: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MleResult {
    pub theta_hat: ThetaNonlinear,
    pub linear_hat: LinearParams,
    pub sigma_hat: CovMatrix,
    pub loglik: f64,
    pub covariance_term: f64,
    pub jacobian_term: f64,
    pub standard_errors: Option<StandardErrors>,
    pub starts: Vec<StartRecord>,
    pub converged: bool,
    pub failed_evaluations: usize,
}

/// Maximize the concentrated likelihood from each start and keep the best.
pub fn mle_estimate(model: &MixedLogit, dataset: &Dataset, config: &MleConfig) -> Result<MleResult> {
    let design = LinearDesign::from_dataset(dataset)?;
    let n_obs = design.n_obs() as f64;
    let bounds = theta_bounds(model.k_rc());
    let warm = WarmStarts::new();
    let failures = std::sync::atomic::AtomicUsize::new(0);
    let settings = &config.likelihood;

    let objective = |x: &[f64]| -> f64 {
        let theta = ThetaNonlinear::from_slice(x);
        let value = evaluate_theta(model, dataset, &theta, settings, true, Some(&warm))
            .and_then(|ev| concentrated_from_eval(&ev, &design, settings));
        match value {
            Ok(v) => -v.total / n_obs,
            Err(e) => {
                failures.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                debug!("likelihood evaluation failed at {x:?}: {e}");
                f64::INFINITY
            }
        }
    };

    let mut records = Vec::new();
    let mut best: Option<(f64, Vec<f64>, bool)> = None;
    for start in config.starts.points(&bounds) {
        match minimize(&objective, &start, &bounds, &config.optimizer) {
            Some(r) => {
                let ll = -r.f * n_obs;
                if best.as_ref().map_or(true, |b| ll > b.0) {
                    best = Some((ll, r.x.clone(), r.converged));
                }
                records.push(StartRecord {
                    initial: start,
                    optimum: Some(r.x),
                    objective: Some(ll),
                    converged: r.converged,
                    iterations: r.iterations,
                    evaluations: r.evaluations,
                    error: None,
                });
            }
            None => records.push(StartRecord {
                initial: start,
                optimum: None,
                objective: None,
                converged: false,
                iterations: 0,
                evaluations: 1,
                error: Some("likelihood not finite at the starting point".into()),
            }),
        }
    }
    let Some((_, x_best, converged)) = best else {
        let diagnostics = records
            .iter()
            .map(|r| format!("{:?}: {}", r.initial, r.error.as_deref().unwrap_or("?")))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::AllStartsFailed {
            starts: records.len(),
            diagnostics,
        });
    };
    let theta_hat = ThetaNonlinear::from_slice(&x_best);
    let eval = evaluate_theta(model, dataset, &theta_hat, settings, true, Some(&warm))?;
    let value = concentrated_from_eval(&eval, &design, settings)?;
    let linear_hat = value.fit.linear_params();
    let sigma_hat = value.fit.sigma;
    let standard_errors = if config.standard_errors {
        let params = FullParams {
            theta: theta_hat.clone(),
            linear: linear_hat.clone(),
            sigma: sigma_hat,
        };
        Some(fisher_standard_errors(model, dataset, &params, settings, true, config.se_step)?)
    } else {
        None
    };
    Ok(MleResult {
        theta_hat,
        linear_hat,
        sigma_hat,
        loglik: value.total,
        covariance_term: value.covariance_term,
        jacobian_term: value.jacobian_term,
        standard_errors,
        starts: records,
        converged,
        failed_evaluations: failures.into_inner(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{
        foc_residual, solve_prices, PriceSolverSettings, PricingProblem, ScenarioConfig,
        ScenarioName,
    };
    use crate::model::{Dataset, MarketData, RcSource};
    use crate::testing::{equilibrium_market, random_theta, EquilibriumMarket};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> MixedLogit {
        MixedLogit::with_level(vec![RcSource::Demand(1), RcSource::Price], 7).unwrap()
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax() / b.amax().max(1e-12)
    }

    fn foc_at(
        eq: &EquilibriumMarket,
        theta: &ThetaNonlinear,
        p: &DVector<f64>,
        base: &DVector<f64>,
        c: &DVector<f64>,
    ) -> DVector<f64> {
        let problem = PricingProblem {
            demand_chars: &eq.market.demand_chars,
            base_utility: base,
            costs: c,
            ownership: &eq.market.ownership,
        };
        foc_residual(&model(), &problem, theta, p).unwrap()
    }

    fn resolve(
        eq: &EquilibriumMarket,
        theta: &ThetaNonlinear,
        base: &DVector<f64>,
        c: &DVector<f64>,
    ) -> DVector<f64> {
        let problem = PricingProblem {
            demand_chars: &eq.market.demand_chars,
            base_utility: base,
            costs: c,
            ownership: &eq.market.ownership,
        };
        let settings = PriceSolverSettings {
            tol: 1e-14,
            ..Default::default()
        };
        solve_prices(&model(), &problem, theta, &settings, Some(&eq.market.prices))
            .unwrap()
            .prices
    }

    /// Central differences of `f` with respect to each coordinate of `x0`,
    /// one column per coordinate.
    fn fd_columns(x0: &DVector<f64>, h: f64, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> DMatrix<f64> {
        let n = x0.len();
        let cols: Vec<DVector<f64>> = (0..n)
            .map(|l| {
                let (mut up, mut dn) = (x0.clone(), x0.clone());
                up[l] += h;
                dn[l] -= h;
                (f(&up) - f(&dn)) / (2.0 * h)
            })
            .collect();
        DMatrix::from_columns(&cols)
    }

    fn setup(seed: u64, n: usize) -> (EquilibriumMarket, ThetaNonlinear, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = random_theta(&mut rng);
        let eq = equilibrium_market(&mut rng, &model(), n, &theta);
        let delta = &eq.base + &eq.market.prices * theta.alpha;
        (eq, theta, delta)
    }

    #[test]
    fn foc_blocks_match_finite_differences() {
        for seed in 0..10 {
            let (eq, theta, delta) = setup(seed, 3 + seed as usize);
            let blocks = foc_derivative_blocks(
                &model(), &eq.market, &theta, &delta, &eq.costs, &eq.market.ownership,
            )
            .unwrap();
            let p = &eq.market.prices;
            let fd_p = fd_columns(p, 1e-6, |x| foc_at(&eq, &theta, x, &eq.base, &eq.costs));
            let fd_d = fd_columns(&eq.base, 1e-6, |x| foc_at(&eq, &theta, p, x, &eq.costs));
            let fd_c = fd_columns(&eq.costs, 1e-6, |x| foc_at(&eq, &theta, p, &eq.base, x));
            assert!(rel_err(&blocks.j_fp, &fd_p) < 1e-6, "J_Fp seed {seed}");
            assert!(rel_err(&blocks.j_fdelta, &fd_d) < 1e-6, "J_Fδ seed {seed}");
            assert!(rel_err(&blocks.j_fc, &fd_c) < 1e-6, "J_Fc seed {seed}");
        }
    }

    #[test]
    fn implicit_price_derivatives_match_resolved_equilibria() {
        for seed in 10..16 {
            let (eq, theta, delta) = setup(seed, 4 + seed as usize % 5);
            let jac = assemble_market_jacobian(
                &model(), &eq.market, &theta, &delta, &eq.costs, &eq.market.ownership,
            )
            .unwrap();
            let dp_dc = fd_columns(&eq.costs, 1e-5, |c| resolve(&eq, &theta, &eq.base, c));
            let dp_dd = fd_columns(&eq.base, 1e-5, |b| resolve(&eq, &theta, b, &eq.costs));
            assert!(rel_err(&jac.dp_dc, &dp_dc) < 1e-4, "dp/dc seed {seed}");
            assert!(rel_err(&jac.dp_ddelta, &dp_dd) < 1e-4, "dp/dδ seed {seed}");
        }
    }

    #[test]
    fn log_abs_det_matches_eigenvalues_and_block_factorization() {
        for seed in 20..30 {
            let (eq, theta, delta) = setup(seed, 2 + seed as usize % 9);
            let jac = assemble_market_jacobian(
                &model(), &eq.market, &theta, &delta, &eq.costs, &eq.market.ownership,
            )
            .unwrap();
            let eig: f64 = jac.stacked().complex_eigenvalues().iter().map(|z| z.norm().ln()).sum();
            assert!((jac.logabsdet - eig).abs() < 1e-8, "eigen seed {seed}");

            let kernel = model().kernel(&eq.market, &theta).unwrap();
            let ns = kernel.node_shares(&delta);
            let (a, _) = log_abs_det(&kernel.j_sdelta(&ns).transpose());
            let (b, _) = log_abs_det(&jac.dp_dc);
            assert!((jac.logabsdet - a - b).abs() < 1e-8, "factorization seed {seed}");
        }
    }

    #[test]
    fn log_abs_det_is_permutation_invariant() {
        let (eq, theta, delta) = setup(40, 9);
        let jac = assemble_market_jacobian(
            &model(), &eq.market, &theta, &delta, &eq.costs, &eq.market.ownership,
        )
        .unwrap();
        let perm = [4, 1, 8, 0, 7, 2, 6, 3, 5];
        let pm = eq.market.permuted(&perm);
        let pd = DVector::from_fn(9, |j, _| delta[perm[j]]);
        let pc = DVector::from_fn(9, |j, _| eq.costs[perm[j]]);
        let pjac = assemble_market_jacobian(&model(), &pm, &theta, &pd, &pc, &pm.ownership).unwrap();
        assert!((jac.logabsdet - pjac.logabsdet).abs() < 1e-10);
    }

    #[test]
    fn single_product_logit_price_jacobian() {
        let x = DMatrix::from_element(1, 1, 1.0);
        let (p, c, s, alpha) = (2.2, 1.4, 0.35, -1.3);
        let m = MarketData::new(0, x.clone(), x, DVector::from_element(1, p), DVector::from_element(1, s), vec![0])
            .unwrap();
        let model = MixedLogit::with_level(vec![RcSource::Price], 3).unwrap();
        let theta = ThetaNonlinear::new(alpha, vec![0.0]);
        let delta = crate::inversion::logit_delta(&m.shares);
        let blocks =
            foc_derivative_blocks(&model, &m, &theta, &delta, &DVector::from_element(1, c), &m.ownership)
                .unwrap();
        let ds = alpha * s * (1.0 - s);
        let d2s = alpha * alpha * s * (1.0 - s) * (1.0 - 2.0 * s);
        assert!((blocks.j_fp[(0, 0)] - (2.0 * ds + (p - c) * d2s)).abs() < 1e-12);
    }

    fn random_design(rng: &mut ChaCha8Rng, n: usize) -> (LinearDesign, DVector<f64>, DVector<f64>) {
        let x = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { rng.random::<f64>() });
        let w = DMatrix::from_fn(n, 3, |_, c| if c == 0 { 1.0 } else { rng.random::<f64>() });
        let e: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = &x * DVector::from_vec(vec![-2.0, 3.0]) + DVector::from_fn(n, |j, _| e[j]);
        let c = &w * DVector::from_vec(vec![1.0, 0.5, 0.2])
            + DVector::from_fn(n, |j, _| 0.4 * e[j] + e[n + j]);
        (LinearDesign::new(x, w).unwrap(), y, c)
    }

    #[test]
    fn als_with_common_regressors_is_equation_by_equation_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 60;
        let x = DMatrix::from_fn(n, 3, |_, c| if c == 0 { 1.0 } else { rng.random::<f64>() });
        let y = DVector::from_fn(n, |_, _| rng.random::<f64>());
        let c = DVector::from_fn(n, |_, _| rng.random::<f64>());
        let design = LinearDesign::new(x.clone(), x.clone()).unwrap();
        let fit = concentrate_linear(&y, &c, &design, 1e-13, 10_000).unwrap();
        let b = crate::linalg::ols(&x, &y).unwrap();
        let g = crate::linalg::ols(&x, &c).unwrap();
        assert!((&fit.beta - b).amax() < 1e-10);
        assert!((&fit.gamma - g).amax() < 1e-10);
    }

    #[test]
    fn als_decreases_determinant_and_solves_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let (design, y, c) = random_design(&mut rng, 80);
            let fit = concentrate_linear(&y, &c, &design, 1e-13, 10_000).unwrap();
            for w in fit.log_det_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{w:?}");
            }
            let (rb, rg) = als_normal_residuals(&fit, &design);
            assert!(rb <= 1e-10 && rg <= 1e-10, "{rb:e} {rg:e}");
        }
    }

    #[test]
    fn quadratic_form_at_unnormalized_cross_product_is_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [3, 10, 200] {
            let xi = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let u = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            assert!((unnormalized_quadratic_form(&xi, &u) - 2.0).abs() < 1e-10);
        }
    }

    fn small_scenario(markets: usize, seed: u64) -> (MixedLogit, Dataset, ScenarioConfig) {
        let mut cfg = ScenarioConfig::preset(ScenarioName::LowCov, seed);
        cfg.n_markets = markets;
        let syn = crate::equilibrium::draw_scenario(&cfg).unwrap();
        (cfg.model().unwrap(), syn.dataset, cfg)
    }

    #[test]
    fn concentrated_and_profiled_unconcentrated_differences_agree() {
        let (model, data, cfg) = small_scenario(4, 11);
        let s = cfg.likelihood_settings();
        let profiled = |theta: &ThetaNonlinear| {
            let c = concentrated_loglik(&model, &data, theta, &s).unwrap();
            let params = FullParams {
                theta: theta.clone(),
                linear: c.fit.linear_params(),
                sigma: c.fit.sigma,
            };
            (c.total, unconcentrated_loglik(&model, &data, &params, &s).unwrap())
        };
        let (c1, u1) = profiled(&cfg.true_nonlinear);
        let (c2, u2) = profiled(&ThetaNonlinear::new(-1.3, vec![2.5, 0.4]));
        assert!(((c1 - c2) - (u1 - u2)).abs() < 1e-8, "{} vs {}", c1 - c2, u1 - u2);
    }

    #[test]
    fn duplicating_markets_doubles_both_terms() {
        let (model, data, cfg) = small_scenario(3, 12);
        let s = cfg.likelihood_settings();
        let mut doubled = data.markets.clone();
        doubled.extend(data.markets.iter().cloned());
        let doubled = Dataset::new(doubled).unwrap();
        let a = concentrated_loglik(&model, &data, &cfg.true_nonlinear, &s).unwrap();
        let b = concentrated_loglik(&model, &doubled, &cfg.true_nonlinear, &s).unwrap();
        assert!((b.covariance_term - 2.0 * a.covariance_term).abs() < 1e-8 * a.covariance_term.abs());
        assert!((b.jacobian_term - 2.0 * a.jacobian_term).abs() < 1e-8 * a.jacobian_term.abs());
    }

    #[test]
    fn gaussian_location_standard_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 30;
        let x = DMatrix::from_element(n, 1, 1.0);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum::<f64>() * 1.5;
        let shares = DVector::from_fn(n, |j, _| raw[j] / total);
        let prices = DVector::from_fn(n, |_, _| rng.random_range(1.5..2.5));
        let firms: Vec<i64> = (0..n as i64).collect();
        let m = MarketData::new(0, x.clone(), x, prices, shares, firms).unwrap();
        let data = Dataset::new(vec![m]).unwrap();
        let model = MixedLogit::with_level(vec![RcSource::Price], 5).unwrap();
        let theta = ThetaNonlinear::new(-1.0, vec![0.3]);
        let s = LikelihoodSettings::default();
        let c = concentrated_loglik(&model, &data, &theta, &s).unwrap();
        let params = FullParams {
            theta,
            linear: c.fit.linear_params(),
            sigma: c.fit.sigma,
        };
        let se = fisher_standard_errors(&model, &data, &params, &s, false, 1e-4).unwrap();
        let (a, b, r) = (c.fit.sigma.sigma_xi_sq, c.fit.sigma.sigma_u_sq, c.fit.sigma.sigma_xi_u);
        let nf = n as f64;
        let want = [
            ("beta_0", (a / nf).sqrt()),
            ("gamma_0", (b / nf).sqrt()),
            ("sigma_xi_sq", (2.0 * a * a / nf).sqrt()),
            ("sigma_u_sq", (2.0 * b * b / nf).sqrt()),
            ("sigma_xi_u", ((a * b + r * r) / nf).sqrt()),
        ];
        for (name, v) in want {
            let got = se.get(name).unwrap();
            assert!((got - v).abs() < 1e-6 * v.max(1.0), "{name}: {got} vs {v}");
        }
    }

    #[test]
    fn mle_beats_truth_on_a_small_scenario() {
        let (model, data, cfg) = small_scenario(6, 14);
        let mut config = MleConfig::new(StartPolicy::around(&cfg.true_nonlinear, 3));
        config.likelihood = cfg.likelihood_settings();
        config.starts.n_random = 2;
        let r = mle_estimate(&model, &data, &config).unwrap();
        let at_truth = concentrated_loglik(&model, &data, &cfg.true_nonlinear, &config.likelihood).unwrap();
        assert!(r.loglik >= at_truth.total - 1e-8);
        let se = r.standard_errors.unwrap();
        assert!(se.values.is_some());
        assert_eq!(r.starts.len(), 2);
    }
}
