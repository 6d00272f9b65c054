//! Synthetic markets: scenario primitives and the Bertrand-Nash price solver.
//!
//! Prices solve `F(p) = s(p) + (O∘J_sp(p))(p − c) = 0`. The solver iterates
//! the Morrow-Skerlos markup map
//!
//! ```text
//! ζ(p) = Λ⁻¹ [(O∘Γ)(p − c) − s],   p ← c + ζ(p)
//! ```
//!
//! with `Λ = diag(Σ_i w_i a_i s_i)` and `Γ = Σ_i w_i a_i s_i s_iᵀ`, which is the
//! residual step `p ← p − Λ⁻¹ F(p)`. The step is halved whenever the residual
//! grows; if the map stalls the solver switches to damped Newton on `F`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::likelihood::foc_blocks_at;
use crate::linalg::lu_solve_vec;
use crate::model::{
    CovMatrix, Dataset, LinearParams, MarketData, MarketKernel, MixedLogit, NodeShares, RcSource,
    ThetaNonlinear,
};
use crate::quadrature::DEFAULT_LEVEL;
use crate::rng::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioName {
    NoCov,
    LowCov,
    HighCov,
    LaplaceNoCov,
    LaplaceLowCov,
    SupplyMisspec,
    OwnershipMisspec,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 7] = [
        ScenarioName::NoCov,
        ScenarioName::LowCov,
        ScenarioName::HighCov,
        ScenarioName::LaplaceNoCov,
        ScenarioName::LaplaceLowCov,
        ScenarioName::SupplyMisspec,
        ScenarioName::OwnershipMisspec,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::NoCov => "no_cov",
            ScenarioName::LowCov => "low_cov",
            ScenarioName::HighCov => "high_cov",
            ScenarioName::LaplaceNoCov => "laplace_no_cov",
            ScenarioName::LaplaceLowCov => "laplace_low_cov",
            ScenarioName::SupplyMisspec => "supply_misspec",
            ScenarioName::OwnershipMisspec => "ownership_misspec",
        }
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|n| n.as_str()).collect();
                Error::Config(format!("unknown scenario '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorFamily {
    Normal,
    LaplaceGaussianCopula,
}

/// Functional form the estimator assumes for marginal cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupplyForm {
    /// `c = Wγ + u`.
    Linear,
    /// `ln c = Wγ + u`.
    LogLinear,
}

/// Ownership structure the estimator assumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OwnershipMode {
    /// The firm structure recorded in the data.
    True,
    /// Every product priced by its own firm.
    Identity,
}

impl OwnershipMode {
    pub fn matrix(self, market: &MarketData) -> DMatrix<f64> {
        match self {
            OwnershipMode::True => market.ownership.clone(),
            OwnershipMode::Identity => DMatrix::identity(market.n_products(), market.n_products()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: ScenarioName,
    pub n_markets: usize,
    pub firm_count_choices: Vec<usize>,
    pub products_per_firm_choices: Vec<usize>,
    pub error_family: ErrorFamily,
    pub sigma_true: CovMatrix,
    pub true_linear: LinearParams,
    pub true_nonlinear: ThetaNonlinear,
    pub rc_layout: Vec<RcSource>,
    pub quadrature_level: usize,
    pub estimation_supply_form: SupplyForm,
    pub estimation_ownership: OwnershipMode,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn preset(name: ScenarioName, seed: u64) -> Self {
        let (xi, u, cov, family) = match name {
            ScenarioName::NoCov => (0.2, 0.2, 0.0, ErrorFamily::Normal),
            ScenarioName::LowCov | ScenarioName::SupplyMisspec | ScenarioName::OwnershipMisspec => {
                (0.2, 0.2, 0.1, ErrorFamily::Normal)
            }
            ScenarioName::HighCov => (0.3, 0.3, 0.2, ErrorFamily::Normal),
            ScenarioName::LaplaceNoCov => (0.2, 0.2, 0.0, ErrorFamily::LaplaceGaussianCopula),
            ScenarioName::LaplaceLowCov => (0.2, 0.2, 0.1, ErrorFamily::LaplaceGaussianCopula),
        };
        Self {
            name,
            n_markets: 20,
            firm_count_choices: vec![2, 5, 10],
            products_per_firm_choices: vec![3, 4, 5],
            error_family: family,
            sigma_true: CovMatrix {
                sigma_xi_sq: xi,
                sigma_u_sq: u,
                sigma_xi_u: cov,
            },
            true_linear: LinearParams::new(vec![-7.0, 6.0], vec![2.0, 1.0, 0.2]),
            true_nonlinear: ThetaNonlinear::new(-1.0, vec![3.0, 0.2]),
            rc_layout: vec![RcSource::Demand(1), RcSource::Price],
            quadrature_level: DEFAULT_LEVEL,
            estimation_supply_form: if name == ScenarioName::SupplyMisspec {
                SupplyForm::LogLinear
            } else {
                SupplyForm::Linear
            },
            estimation_ownership: if name == ScenarioName::OwnershipMisspec {
                OwnershipMode::Identity
            } else {
                OwnershipMode::True
            },
            seed,
        }
    }

    /// Estimation settings matching the scenario's assumed supply side and conduct.
    pub fn likelihood_settings(&self) -> crate::likelihood::LikelihoodSettings {
        crate::likelihood::LikelihoodSettings {
            supply_form: self.estimation_supply_form,
            ownership: self.estimation_ownership,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_markets == 0 {
            return bad("n_markets must be positive".into());
        }
        if self.firm_count_choices.is_empty()
            || self.products_per_firm_choices.is_empty()
            || self.firm_count_choices.contains(&0)
            || self.products_per_firm_choices.contains(&0)
        {
            return bad("firm and product count choices must be nonempty and positive".into());
        }
        if !self.sigma_true.is_positive_definite() {
            return bad(format!("sigma_true is not positive definite: {:?}", self.sigma_true));
        }
        if self.true_linear.beta.len() != 2 || self.true_linear.gamma.len() != 3 {
            return bad("the generator uses X = [1, x] and W = [1, x, w]".into());
        }
        self.true_nonlinear.validate(self.rc_layout.len())?;
        if self.rc_layout.iter().any(|s| matches!(s, RcSource::Demand(c) if *c >= 2)) {
            return bad("random coefficients may only load on demand columns 0 or 1".into());
        }
        Ok(())
    }

    pub fn model(&self) -> Result<MixedLogit> {
        MixedLogit::with_level(self.rc_layout.clone(), self.quadrature_level)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub true_theta: ThetaNonlinear,
    pub true_linear: LinearParams,
    pub true_sigma: CovMatrix,
    pub true_costs: Vec<DVector<f64>>,
    /// Per market `(ξ, u)`.
    pub true_errors: Vec<(DVector<f64>, DVector<f64>)>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceSolverSettings {
    /// Bound on the max-abs FOC residual.
    pub tol: f64,
    pub max_iters: usize,
    pub newton_iters: usize,
}

impl Default for PriceSolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 5000,
            newton_iters: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PriceSolution {
    pub prices: DVector<f64>,
    pub shares: DVector<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub newton_steps: usize,
}

/// Inputs of one market's pricing game.
#[derive(Clone, Copy, Debug)]
pub struct PricingProblem<'a> {
    pub demand_chars: &'a DMatrix<f64>,
    /// Mean utility net of the price term, `Xβ + ξ`.
    pub base_utility: &'a DVector<f64>,
    pub costs: &'a DVector<f64>,
    pub ownership: &'a DMatrix<f64>,
}

struct FocState {
    kernel: MarketKernel,
    ns: NodeShares,
    residual: DVector<f64>,
    norm: f64,
}

fn foc_state(
    model: &MixedLogit,
    problem: &PricingProblem<'_>,
    theta: &ThetaNonlinear,
    prices: &DVector<f64>,
) -> Result<FocState> {
    let kernel = model.kernel_at_prices(problem.demand_chars, prices, theta)?;
    let delta = problem.base_utility + prices * theta.alpha;
    let ns = kernel.node_shares(&delta);
    let ojsp = problem.ownership.component_mul(&kernel.j_sp(&ns));
    let residual = &ns.shares + ojsp * (prices - problem.costs);
    let norm = residual.amax();
    if !norm.is_finite() {
        return Err(Error::NonFinite("pricing first-order conditions"));
    }
    Ok(FocState {
        kernel,
        ns,
        residual,
        norm,
    })
}

/// Max-abs residual of the Bertrand first-order conditions at `prices`.
pub fn foc_residual(
    model: &MixedLogit,
    problem: &PricingProblem<'_>,
    theta: &ThetaNonlinear,
    prices: &DVector<f64>,
) -> Result<DVector<f64>> {
    foc_state(model, problem, theta, prices).map(|s| s.residual)
}

pub fn solve_prices(
    model: &MixedLogit,
    problem: &PricingProblem<'_>,
    theta: &ThetaNonlinear,
    settings: &PriceSolverSettings,
    start: Option<&DVector<f64>>,
) -> Result<PriceSolution> {
    let n = problem.costs.len();
    if problem.base_utility.len() != n
        || problem.demand_chars.nrows() != n
        || problem.ownership.shape() != (n, n)
    {
        return Err(Error::DimensionMismatch {
            what: "pricing problem",
            expected: n,
            actual: problem.base_utility.len(),
        });
    }
    if problem.costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput("costs must be finite".into()));
    }
    let mut p = start.cloned().unwrap_or_else(|| problem.costs.add_scalar(1.0));
    let mut best = (f64::INFINITY, p.clone());
    let mut damping: f64 = 1.0;
    let mut previous = f64::INFINITY;
    let mut since_improvement = 0;
    let mut iterations = 0;

    let done = |state: &FocState, p: DVector<f64>, iterations, newton_steps| PriceSolution {
        prices: p,
        shares: state.ns.shares.clone(),
        residual: state.norm,
        iterations,
        newton_steps,
    };

    while iterations < settings.max_iters {
        let state = foc_state(model, problem, theta, &p)?;
        iterations += 1;
        if state.norm <= settings.tol {
            return Ok(done(&state, p, iterations, 0));
        }
        if state.norm < best.0 {
            if state.norm < 0.999 * best.0 {
                since_improvement = 0;
            }
            best = (state.norm, p.clone());
        } else {
            since_improvement += 1;
        }
        if since_improvement > 50 {
            break;
        }
        if state.norm > previous {
            damping = (damping * 0.5).max(1.0 / 64.0);
        }
        previous = state.norm;
        // Λ_j = Σ_i w_i a_i s_ij
        let lambda = state
            .ns
            .per_node
            .tr_mul(&state.kernel.probabilities().component_mul(state.kernel.price_slope()));
        let step = state.residual.component_div(&lambda);
        let next = &p - step * damping;
        if next.iter().any(|v| !v.is_finite()) {
            break;
        }
        p = next;
    }

    // damped Newton from the best iterate
    let mut p = best.1;
    let mut state = foc_state(model, problem, theta, &p)?;
    for step in 0..settings.newton_iters {
        if state.norm <= settings.tol {
            return Ok(done(&state, p, iterations, step));
        }
        let markups = &p - problem.costs;
        let blocks = foc_blocks_at(&state.kernel, &state.ns, &markups, problem.ownership);
        let dir = lu_solve_vec(&blocks.j_fp, &state.residual).ok_or(Error::Singular {
            what: "pricing Jacobian",
            market: -1,
        })?;
        let mut t = 1.0;
        loop {
            let trial = &p - &dir * t;
            if let Ok(s) = foc_state(model, problem, theta, &trial) {
                if s.norm < (1.0 - 1e-4 * t) * state.norm || t < 1e-6 {
                    p = trial;
                    state = s;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-10 {
                return Err(Error::NoConvergence {
                    what: "price equilibrium",
                    iterations: iterations + step,
                    residual: state.norm,
                });
            }
        }
    }
    if state.norm <= settings.tol {
        return Ok(done(&state, p, iterations, settings.newton_iters));
    }
    Err(Error::NoConvergence {
        what: "price equilibrium",
        iterations: iterations + settings.newton_iters,
        residual: state.norm,
    })
}

/// `n` draws of `(ξ, u)` with Laplace marginals whose variances are the
/// diagonal of `sigma`, coupled by a Gaussian copula with correlation equal to
/// `sigma`'s implied correlation.
pub fn laplace_copula_draws(n: usize, sigma: &CovMatrix, seed: u64) -> Result<DMatrix<f64>> {
    if !sigma.is_positive_definite() {
        return Err(Error::InvalidInput(format!("covariance not positive definite: {sigma:?}")));
    }
    let mut rng = rng::stream(seed);
    let rho = sigma.correlation();
    let tail = (1.0 - rho * rho).sqrt();
    let b = [(sigma.sigma_xi_sq / 2.0).sqrt(), (sigma.sigma_u_sq / 2.0).sqrt()];
    let mut out = DMatrix::zeros(n, 2);
    for r in 0..n {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let z = [z1, rho * z1 + tail * z2];
        for c in 0..2 {
            out[(r, c)] = laplace_from_normal(z[c], b[c]);
        }
    }
    Ok(out)
}

/// Laplace(0, b) quantile of `Φ(z)`, written to stay accurate in both tails:
/// `sign(z) · (−b ln(2Φ(−|z|)))`.
fn laplace_from_normal(z: f64, b: f64) -> f64 {
    let two_tail = erfc(z.abs() / std::f64::consts::SQRT_2);
    -z.signum() * b * two_tail.ln()
}

fn normal_errors(n: usize, sigma: &CovMatrix, seed: u64) -> DMatrix<f64> {
    let mut rng = rng::stream(seed);
    let l11 = sigma.sigma_xi_sq.sqrt();
    let l21 = sigma.sigma_xi_u / l11;
    let l22 = (sigma.sigma_u_sq - l21 * l21).sqrt();
    let mut out = DMatrix::zeros(n, 2);
    for r in 0..n {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        out[(r, 0)] = l11 * z1;
        out[(r, 1)] = l21 * z1 + l22 * z2;
    }
    out
}

struct DrawnMarket {
    market: MarketData,
    costs: DVector<f64>,
    xi: DVector<f64>,
    u: DVector<f64>,
}

fn draw_market(config: &ScenarioConfig, model: &MixedLogit, index: usize) -> Result<DrawnMarket> {
    let seed = config.seed;
    let t = index as u64;
    let mut structure = rng::market_stream(seed, t, Stream::Structure);
    let n_firms =
        config.firm_count_choices[structure.random_range(0..config.firm_count_choices.len())];
    let mut firm_ids = Vec::new();
    for f in 0..n_firms {
        let choices = &config.products_per_firm_choices;
        let count = choices[structure.random_range(0..choices.len())];
        firm_ids.extend(std::iter::repeat_n(f as i64, count));
    }
    let n = firm_ids.len();

    let mut dem = rng::market_stream(seed, t, Stream::DemandChars);
    let x: Vec<f64> = (0..n).map(|_| dem.random::<f64>()).collect();
    let mut cost = rng::market_stream(seed, t, Stream::CostChars);
    let w: Vec<f64> = (0..n).map(|_| cost.random::<f64>()).collect();
    let demand_chars = DMatrix::from_fn(n, 2, |j, c| if c == 0 { 1.0 } else { x[j] });
    let cost_chars = DMatrix::from_fn(n, 3, |j, c| match c {
        0 => 1.0,
        1 => x[j],
        _ => w[j],
    });

    let err_seed = rng::derive(rng::derive(seed, t), Stream::Errors as u64);
    let errors = match config.error_family {
        ErrorFamily::Normal => normal_errors(n, &config.sigma_true, err_seed),
        ErrorFamily::LaplaceGaussianCopula => laplace_copula_draws(n, &config.sigma_true, err_seed)?,
    };
    let xi = errors.column(0).into_owned();
    let u = errors.column(1).into_owned();

    let base = &demand_chars * config.true_linear.beta_vec() + &xi;
    let costs = &cost_chars * config.true_linear.gamma_vec() + &u;
    let ownership = crate::model::ownership_from_firms(&firm_ids);
    let problem = PricingProblem {
        demand_chars: &demand_chars,
        base_utility: &base,
        costs: &costs,
        ownership: &ownership,
    };
    let solution = solve_prices(
        model,
        &problem,
        &config.true_nonlinear,
        &PriceSolverSettings::default(),
        None,
    )?;
    let market = MarketData::new(
        index as i64,
        demand_chars,
        cost_chars,
        solution.prices,
        solution.shares,
        firm_ids,
    )?;
    Ok(DrawnMarket { market, costs, xi, u })
}

/// Draw every market of a scenario and solve its price equilibrium.
/// Deterministic in `config.seed`; markets are generated in parallel.
pub fn draw_scenario(config: &ScenarioConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let model = config.model()?;
    let drawn: Vec<DrawnMarket> = (0..config.n_markets)
        .into_par_iter()
        .map(|t| draw_market(config, &model, t).map_err(|e| e.in_market(t as i64)))
        .collect::<Result<_>>()?;
    let mut markets = Vec::with_capacity(drawn.len());
    let mut true_costs = Vec::with_capacity(drawn.len());
    let mut true_errors = Vec::with_capacity(drawn.len());
    for d in drawn {
        markets.push(d.market);
        true_costs.push(d.costs);
        true_errors.push((d.xi, d.u));
    }
    Ok(SyntheticDataset {
        dataset: Dataset::new(markets)?,
        true_theta: config.true_nonlinear.clone(),
        true_linear: config.true_linear.clone(),
        true_sigma: config.sigma_true,
        true_costs,
        true_errors,
        seed: config.seed,
    })
}
