//! Random fixtures shared by unit tests.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt};

use crate::model::{MarketData, ThetaNonlinear};

/// A market with `n` products over up to three firms and a mean-utility vector.
/// Observed shares are the plain-logit shares of `δ`.
pub fn random_market<R: Rng>(rng: &mut R, n: usize) -> (MarketData, DVector<f64>) {
    let x = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { rng.random::<f64>() });
    let w = DMatrix::from_fn(n, 3, |_, c| if c == 0 { 1.0 } else { rng.random::<f64>() });
    let prices = DVector::from_fn(n, |_, _| rng.random_range(1.0..3.0));
    let delta: DVector<f64> = DVector::from_fn(n, |_, _| rng.random_range(-4.0..-0.5));
    let firms: Vec<i64> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let e = 1.0 + delta.iter().map(|d| d.exp()).sum::<f64>();
    let shares = delta.map(|d| d.exp() / e);
    let m = MarketData::new(7, x, w, prices, shares, firms).expect("valid random market");
    (m, delta)
}

/// Every quadrature node keeps a negative price slope up to level 7.
pub fn random_theta<R: Rng>(rng: &mut R) -> ThetaNonlinear {
    ThetaNonlinear::new(
        rng.random_range(-2.0..-0.8),
        vec![rng.random_range(0.2..3.0), rng.random_range(0.0..0.2)],
    )
}

/// A market in Bertrand-Nash equilibrium at `theta`, with its price-exclusive
/// mean utility and costs.
pub struct EquilibriumMarket {
    pub market: MarketData,
    pub base: DVector<f64>,
    pub costs: DVector<f64>,
}

pub fn equilibrium_market<R: Rng>(
    rng: &mut R,
    model: &crate::model::MixedLogit,
    n: usize,
    theta: &ThetaNonlinear,
) -> EquilibriumMarket {
    use crate::equilibrium::{solve_prices, PriceSolverSettings, PricingProblem};
    let x = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { rng.random::<f64>() });
    let w = DMatrix::from_fn(n, 3, |_, c| if c == 0 { 1.0 } else { rng.random::<f64>() });
    let base = DVector::from_fn(n, |j, _| -1.0 + 2.0 * x[(j, 1)] + rng.random_range(-0.5..0.5));
    let costs = DVector::from_fn(n, |_, _| rng.random_range(1.0..3.0));
    let firms: Vec<i64> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let ownership = crate::model::ownership_from_firms(&firms);
    let problem = PricingProblem {
        demand_chars: &x,
        base_utility: &base,
        costs: &costs,
        ownership: &ownership,
    };
    let settings = PriceSolverSettings {
        tol: 1e-13,
        ..Default::default()
    };
    let sol = solve_prices(model, &problem, theta, &settings, None).expect("equilibrium");
    let market = MarketData::new(7, x, w, sol.prices, sol.shares, firms).expect("valid market");
    EquilibriumMarket {
        market,
        base,
        costs,
    }
}
