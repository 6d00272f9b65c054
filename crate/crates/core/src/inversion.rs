//! Share inversion and marginal-cost recovery.
//!
//! Mean utilities solve `δ = δ + ln s_obs − ln s(δ)`, a contraction. The
//! default solver accelerates it with SQUAREM (squared-norm step length, the
//! "S3" variant) and falls back to two plain steps whenever the extrapolated
//! point has a larger residual than the point it started from.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::lu_solve_vec;
use crate::model::{MarketData, MarketKernel, MixedLogit, NodeShares, ThetaNonlinear};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acceleration {
    Squarem,
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionSettings {
    /// Bound on both the max-abs change in `δ` and the max-abs log-share residual.
    pub tol: f64,
    /// Plain steps, or SQUAREM cycles.
    pub max_iters: usize,
    pub acceleration: Acceleration,
}

impl Default for InversionSettings {
    fn default() -> Self {
        Self {
            tol: 1e-13,
            max_iters: 1000,
            acceleration: Acceleration::Squarem,
        }
    }
}

impl InversionSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::Config(format!("invalid inversion settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct InversionSummary {
    pub iterations: usize,
    pub share_evaluations: usize,
    pub residual: f64,
    /// Max-abs log-share residual after each plain step (plain mode only).
    pub residual_trace: Vec<f64>,
}

/// Berry's closed form for the plain logit: `ln s_j − ln s_0`.
pub fn logit_delta(shares: &DVector<f64>) -> DVector<f64> {
    let ln_s0 = (1.0 - shares.sum()).ln();
    shares.map(|s| s.ln() - ln_s0)
}

/// Mean utilities rationalizing the market's observed shares at `theta`.
pub fn invert_shares(
    model: &MixedLogit,
    market: &MarketData,
    theta: &ThetaNonlinear,
    settings: &InversionSettings,
) -> Result<DVector<f64>> {
    let kernel = model.kernel(market, theta)?;
    invert_with_kernel(&kernel, &market.shares, None, settings)
        .map(|(d, _)| d)
        .map_err(|e| e.in_market(market.market_id))
}

pub fn invert_with_kernel(
    kernel: &MarketKernel,
    observed: &DVector<f64>,
    start: Option<&DVector<f64>>,
    settings: &InversionSettings,
) -> Result<(DVector<f64>, InversionSummary)> {
    settings.validate()?;
    let log_obs = observed.map(f64::ln);
    let mut summary = InversionSummary::default();
    let mut x = start.cloned().unwrap_or_else(|| logit_delta(observed));

    // G(x) − x, i.e. the log-share residual at x
    let residual_at = |x: &DVector<f64>, evals: &mut usize| -> Result<DVector<f64>> {
        *evals += 1;
        let s = kernel.shares(x);
        let r = &log_obs - s.map(f64::ln);
        if r.iter().all(|v| v.is_finite()) {
            Ok(r)
        } else {
            Err(Error::NonFinite("share inversion iterate"))
        }
    };
    let inf_norm = |v: &DVector<f64>| v.amax();

    match settings.acceleration {
        Acceleration::Plain => {
            for it in 0..settings.max_iters {
                let r = residual_at(&x, &mut summary.share_evaluations)?;
                let res = inf_norm(&r);
                summary.residual_trace.push(res);
                x += &r;
                summary.iterations = it + 1;
                summary.residual = res;
                if res <= settings.tol {
                    return Ok((x, summary));
                }
            }
        }
        Acceleration::Squarem => {
            for it in 0..settings.max_iters {
                summary.iterations = it + 1;
                let r = residual_at(&x, &mut summary.share_evaluations)?;
                let res0 = inf_norm(&r);
                summary.residual = res0;
                let x1 = &x + &r;
                if res0 <= settings.tol {
                    return Ok((x1, summary));
                }
                let r1 = residual_at(&x1, &mut summary.share_evaluations)?;
                let x2 = &x1 + &r1;
                let v = &r1 - &r;
                let v_norm = v.norm();
                if v_norm == 0.0 {
                    x = x2;
                    continue;
                }
                // α ≤ −1 keeps the extrapolation at least as long as two plain steps
                let step = (-(r.norm() / v_norm)).min(-1.0).max(-1e4);
                let x_ext = &x - &r * (2.0 * step) + &v * (step * step);
                let accepted = residual_at(&x_ext, &mut summary.share_evaluations)
                    .ok()
                    .filter(|r_ext| inf_norm(r_ext) <= res0)
                    .map(|r_ext| x_ext + r_ext);
                x = accepted.unwrap_or(x2);
            }
        }
    }
    Err(Error::NoConvergence {
        what: "share inversion",
        iterations: settings.max_iters,
        residual: summary.residual,
    })
}

/// Implied marginal costs `c = p + (O∘J_sp)⁻¹ s`, from the Bertrand first-order
/// conditions `s + (O∘J_sp)(p − c) = 0`, using observed shares. `ownership`
/// is whatever conduct the estimator assumes.
pub fn recover_costs(
    model: &MixedLogit,
    market: &MarketData,
    theta: &ThetaNonlinear,
    delta: &DVector<f64>,
    ownership: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let kernel = model.kernel(market, theta)?;
    let ns = kernel.node_shares(delta);
    recover_costs_with(&kernel, &ns, market, ownership)
}

pub fn recover_costs_with(
    kernel: &MarketKernel,
    ns: &NodeShares,
    market: &MarketData,
    ownership: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let markups = markups(kernel, ns, &market.shares, ownership).ok_or(Error::Singular {
        what: "ownership-weighted price Jacobian",
        market: market.market_id,
    })?;
    Ok(&market.prices - markups)
}

/// `p − c = −(O∘J_sp)⁻¹ s`.
pub fn markups(
    kernel: &MarketKernel,
    ns: &NodeShares,
    shares: &DVector<f64>,
    ownership: &DMatrix<f64>,
) -> Option<DVector<f64>> {
    let ojsp = ownership.component_mul(&kernel.j_sp(ns));
    lu_solve_vec(&ojsp, shares).map(|m| -m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ownership_from_firms, RcSource};
    use crate::testing::{random_market, random_theta};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> MixedLogit {
        MixedLogit::with_level(vec![RcSource::Demand(1), RcSource::Price], 7).unwrap()
    }

    /// Market whose observed shares are the model's shares at `delta`.
    fn consistent(m: &MarketData, theta: &ThetaNonlinear, delta: &DVector<f64>) -> MarketData {
        let mut out = m.clone();
        out.shares = model().compute_shares(delta, m, theta).unwrap();
        out
    }

    #[test]
    fn logit_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m, delta) = random_market(&mut rng, 10);
        let theta = ThetaNonlinear::new(-1.0, vec![0.0, 0.0]);
        let d = invert_shares(&model(), &m, &theta, &InversionSettings::default()).unwrap();
        assert!((&d - &delta).amax() < 1e-12);
    }

    #[test]
    fn round_trip_and_plain_agrees_with_squarem() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plain = InversionSettings {
            acceleration: Acceleration::Plain,
            max_iters: 100_000,
            ..Default::default()
        };
        for _ in 0..10 {
            let (m, delta) = random_market(&mut rng, 12);
            let theta = random_theta(&mut rng);
            let m = consistent(&m, &theta, &delta);
            let d_sq = invert_shares(&model(), &m, &theta, &InversionSettings::default()).unwrap();
            let d_pl = invert_shares(&model(), &m, &theta, &plain).unwrap();
            assert!((&d_sq - &delta).amax() < 1e-10);
            assert!((&d_sq - &d_pl).amax() < 1e-10);
        }
    }

    #[test]
    fn plain_residuals_never_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plain = InversionSettings {
            acceleration: Acceleration::Plain,
            max_iters: 100_000,
            ..Default::default()
        };
        for _ in 0..10 {
            let (m, delta) = random_market(&mut rng, 10);
            let theta = random_theta(&mut rng);
            let m = consistent(&m, &theta, &delta);
            let kernel = model().kernel(&m, &theta).unwrap();
            let (_, summary) = invert_with_kernel(&kernel, &m.shares, None, &plain).unwrap();
            for w in summary.residual_trace.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15, "{w:?}");
            }
        }
    }

    #[test]
    fn iteration_cap_reports_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, delta) = random_market(&mut rng, 10);
        let theta = ThetaNonlinear::new(-1.0, vec![3.0, 0.3]);
        let m = consistent(&m, &theta, &delta);
        let s = InversionSettings {
            max_iters: 1,
            acceleration: Acceleration::Plain,
            ..Default::default()
        };
        match invert_shares(&model(), &m, &theta, &s) {
            Err(Error::Market { source, .. }) => {
                assert!(matches!(*source, Error::NoConvergence { residual, .. } if residual > 0.0))
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn single_product_logit_costs() {
        let x = DMatrix::from_element(1, 1, 1.0);
        let m = MarketData::new(
            0,
            x.clone(),
            x,
            DVector::from_element(1, 2.5),
            DVector::from_element(1, 0.3),
            vec![0],
        )
        .unwrap();
        let model = MixedLogit::with_level(vec![RcSource::Price], 3).unwrap();
        let alpha = -1.7;
        let theta = ThetaNonlinear::new(alpha, vec![0.0]);
        let d = invert_shares(&model, &m, &theta, &InversionSettings::default()).unwrap();
        let c = recover_costs(&model, &m, &theta, &d, &m.ownership).unwrap();
        let want = 2.5 - 1.0 / (alpha.abs() * (1.0 - 0.3));
        assert!((c[0] - want).abs() < 1e-12);
    }

    #[test]
    fn identity_ownership_gives_smaller_markups() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let (m, delta) = random_market(&mut rng, 9);
            let theta = random_theta(&mut rng);
            let m = consistent(&m, &theta, &delta);
            let c_true = recover_costs(&model(), &m, &theta, &delta, &m.ownership).unwrap();
            let eye = DMatrix::identity(9, 9);
            let c_id = recover_costs(&model(), &m, &theta, &delta, &eye).unwrap();
            for j in 0..9 {
                let (mk_true, mk_id) = (m.prices[j] - c_true[j], m.prices[j] - c_id[j]);
                assert!(mk_id > 0.0 && mk_id <= mk_true + 1e-12);
            }
        }
        assert_eq!(ownership_from_firms(&[0, 1]), DMatrix::identity(2, 2));
    }
}
