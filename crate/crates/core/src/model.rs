//! Market data, parameters, and the mixed-logit share kernel with its first
//! and second derivatives.
//!
//! Utility for consumer type `i` (a quadrature node) and product `j` is
//! `V_ji = δ_j + Σ_k z_jk σ_k v_ik`, where `z_jk` is either a demand
//! characteristic or the price and `v_i ~ N(0, I)`. The mean utility `δ`
//! already contains the mean price term `α·p`, so the price slope of `V_ji`
//! at node `i` is `α + σ_price·v_i,price`.
//!
//! Derivative matrices follow the convention `J[j, k] = ∂s_k / ∂x_j`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::QuadratureRule;

/// Which column a random coefficient multiplies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RcSource {
    /// Column index into the demand characteristics.
    Demand(usize),
    Price,
}

/// Nonlinear parameters: the signed mean price coefficient and one standard
/// deviation per random coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaNonlinear {
    pub alpha: f64,
    pub sigma: Vec<f64>,
}

impl ThetaNonlinear {
    pub fn new(alpha: f64, sigma: Vec<f64>) -> Self {
        Self { alpha, sigma }
    }

    /// `[α, σ_1, ..., σ_K]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + self.sigma.len());
        v.push(self.alpha);
        v.extend_from_slice(&self.sigma);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            alpha: v[0],
            sigma: v[1..].to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        1 + self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn validate(&self, k_rc: usize) -> Result<()> {
        if self.sigma.len() != k_rc {
            return Err(Error::DimensionMismatch {
                what: "random-coefficient standard deviations",
                expected: k_rc,
                actual: self.sigma.len(),
            });
        }
        if !self.alpha.is_finite() || self.sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidInput(format!(
                "nonlinear parameters must be finite with sigma >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl LinearParams {
    pub fn new(beta: Vec<f64>, gamma: Vec<f64>) -> Self {
        Self { beta, gamma }
    }

    pub fn beta_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta)
    }

    pub fn gamma_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.gamma)
    }
}

/// The 2×2 covariance of the demand and cost shocks `(ξ, u)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovMatrix {
    pub sigma_xi_sq: f64,
    pub sigma_u_sq: f64,
    pub sigma_xi_u: f64,
}

impl CovMatrix {
    pub fn new(sigma_xi_sq: f64, sigma_u_sq: f64, sigma_xi_u: f64) -> Result<Self> {
        let c = Self {
            sigma_xi_sq,
            sigma_u_sq,
            sigma_xi_u,
        };
        if c.is_positive_definite() {
            Ok(c)
        } else {
            Err(Error::InvalidInput(format!(
                "covariance matrix is not positive definite: {c:?}"
            )))
        }
    }

    pub fn determinant(&self) -> f64 {
        self.sigma_xi_sq * self.sigma_u_sq - self.sigma_xi_u * self.sigma_xi_u
    }

    pub fn is_positive_definite(&self) -> bool {
        self.sigma_xi_sq > 0.0 && self.sigma_u_sq > 0.0 && self.determinant() > 0.0
    }

    pub fn correlation(&self) -> f64 {
        self.sigma_xi_u / (self.sigma_xi_sq * self.sigma_u_sq).sqrt()
    }

    /// Quadratic form `rᵀ Σ⁻¹ r` for `r = (ξ, u)`.
    pub fn quadratic_form(&self, xi: f64, u: f64) -> f64 {
        (xi * xi * self.sigma_u_sq - 2.0 * xi * u * self.sigma_xi_u + u * u * self.sigma_xi_sq)
            / self.determinant()
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.sigma_xi_sq, self.sigma_u_sq, self.sigma_xi_u]
    }
}

/// One market's observed products.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketData {
    pub market_id: i64,
    /// `N × K_d`, intercept included, price excluded.
    pub demand_chars: DMatrix<f64>,
    /// `N × K_s`, intercept included.
    pub cost_chars: DMatrix<f64>,
    pub prices: DVector<f64>,
    pub shares: DVector<f64>,
    pub firm_ids: Vec<i64>,
    pub ownership: DMatrix<f64>,
}

impl MarketData {
    pub fn new(
        market_id: i64,
        demand_chars: DMatrix<f64>,
        cost_chars: DMatrix<f64>,
        prices: DVector<f64>,
        shares: DVector<f64>,
        firm_ids: Vec<i64>,
    ) -> Result<Self> {
        let ownership = ownership_from_firms(&firm_ids);
        let market = Self {
            market_id,
            demand_chars,
            cost_chars,
            prices,
            shares,
            firm_ids,
            ownership,
        };
        market.validate()?;
        Ok(market)
    }

    pub fn n_products(&self) -> usize {
        self.prices.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_products();
        let bad = |msg: String| Err(Error::InvalidInput(msg).in_market(self.market_id));
        if n == 0 {
            return bad("market has no products".into());
        }
        for (what, len) in [
            ("shares", self.shares.len()),
            ("firm ids", self.firm_ids.len()),
            ("demand characteristic rows", self.demand_chars.nrows()),
            ("cost characteristic rows", self.cost_chars.nrows()),
        ] {
            if len != n {
                return bad(format!("{what}: expected {n}, got {len}"));
            }
        }
        if self.ownership.shape() != (n, n) {
            return bad("ownership matrix has the wrong shape".into());
        }
        if self.shares.iter().any(|s| !(*s > 0.0 && *s < 1.0)) {
            return bad("shares must lie strictly inside (0, 1)".into());
        }
        if self.shares.sum() >= 1.0 {
            return bad("inside shares sum to one or more; the outside good needs positive share".into());
        }
        if self.prices.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return bad("prices must be finite and strictly positive".into());
        }
        if self
            .demand_chars
            .iter()
            .chain(self.cost_chars.iter())
            .any(|v| !v.is_finite())
        {
            return bad("characteristics must be finite".into());
        }
        if self.ownership != ownership_from_firms(&self.firm_ids) {
            return bad("ownership matrix disagrees with firm ids".into());
        }
        Ok(())
    }

    /// Share of the outside good.
    pub fn outside_share(&self) -> f64 {
        1.0 - self.shares.sum()
    }

    /// Relabel products: product `j` of the result is product `perm[j]` here.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n_products();
        assert_eq!(perm.len(), n);
        let rows = |m: &DMatrix<f64>| DMatrix::from_fn(n, m.ncols(), |r, c| m[(perm[r], c)]);
        let firm_ids: Vec<i64> = perm.iter().map(|&p| self.firm_ids[p]).collect();
        Self {
            market_id: self.market_id,
            demand_chars: rows(&self.demand_chars),
            cost_chars: rows(&self.cost_chars),
            prices: DVector::from_fn(n, |r, _| self.prices[perm[r]]),
            shares: DVector::from_fn(n, |r, _| self.shares[perm[r]]),
            ownership: ownership_from_firms(&firm_ids),
            firm_ids,
        }
    }
}

/// `O[j, k] = 1` iff products `j` and `k` share a firm.
pub fn ownership_from_firms(firm_ids: &[i64]) -> DMatrix<f64> {
    let n = firm_ids.len();
    DMatrix::from_fn(n, n, |j, k| f64::from(u8::from(firm_ids[j] == firm_ids[k])))
}

/// A collection of markets with common characteristic dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub markets: Vec<MarketData>,
}

impl Dataset {
    pub fn new(markets: Vec<MarketData>) -> Result<Self> {
        let ds = Self { markets };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.markets.first() else {
            return Err(Error::InvalidInput("dataset has no markets".into()));
        };
        let (kd, ks) = (first.demand_chars.ncols(), first.cost_chars.ncols());
        for m in &self.markets {
            m.validate()?;
            if m.demand_chars.ncols() != kd || m.cost_chars.ncols() != ks {
                return Err(Error::InvalidInput(
                    "characteristic counts differ across markets".into(),
                )
                .in_market(m.market_id));
            }
        }
        Ok(())
    }

    pub fn n_observations(&self) -> usize {
        self.markets.iter().map(MarketData::n_products).sum()
    }

    pub fn k_demand(&self) -> usize {
        self.markets[0].demand_chars.ncols()
    }

    pub fn k_cost(&self) -> usize {
        self.markets[0].cost_chars.ncols()
    }

    /// Stack a per-market row matrix across markets.
    pub fn stack_rows(&self, f: impl Fn(&MarketData) -> &DMatrix<f64>) -> DMatrix<f64> {
        let parts: Vec<&DMatrix<f64>> = self.markets.iter().map(f).collect();
        stack_matrices(&parts)
    }

    pub fn stacked_prices(&self) -> DVector<f64> {
        let parts: Vec<&DVector<f64>> = self.markets.iter().map(|m| &m.prices).collect();
        stack_vectors(&parts)
    }
}

pub(crate) fn stack_matrices(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = parts.iter().map(|m| m.nrows()).sum();
    let cols = parts.first().map_or(0, |m| m.ncols());
    let mut out = DMatrix::zeros(rows, cols);
    let mut r0 = 0;
    for m in parts {
        out.view_mut((r0, 0), (m.nrows(), cols)).copy_from(m);
        r0 += m.nrows();
    }
    out
}

pub(crate) fn stack_vectors(parts: &[&DVector<f64>]) -> DVector<f64> {
    let n: usize = parts.iter().map(|v| v.len()).sum();
    let mut out = DVector::zeros(n);
    let mut r0 = 0;
    for v in parts {
        out.rows_mut(r0, v.len()).copy_from(v);
        r0 += v.len();
    }
    out
}

/// Dense `N × N × N` tensor indexed `[k, j, l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    n: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n * n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, k: usize, j: usize, l: usize) -> f64 {
        self.data[(k * self.n + j) * self.n + l]
    }

    #[inline]
    fn add(&mut self, k: usize, j: usize, l: usize, v: f64) {
        self.data[(k * self.n + j) * self.n + l] += v;
    }
}

/// First- and second-order share derivatives for one market.
#[derive(Clone, Debug)]
pub struct ShareDerivatives {
    /// `J_sp[j, k] = ∂s_k/∂p_j`.
    pub j_sp: DMatrix<f64>,
    /// `J_sδ[j, k] = ∂s_k/∂δ_j`.
    pub j_sdelta: DMatrix<f64>,
    /// `[k, j, l] = ∂²s_k/∂p_j∂p_l`.
    pub h_spp: Tensor3,
    /// `[k, j, l] = ∂²s_k/∂p_j∂δ_l`.
    pub h_spdelta: Tensor3,
}

/// Mixed logit with Gauss-Hermite integration over normal random coefficients.
#[derive(Clone, Debug)]
pub struct MixedLogit {
    layout: Vec<RcSource>,
    quadrature: QuadratureRule,
}

impl MixedLogit {
    pub fn new(layout: Vec<RcSource>, quadrature: QuadratureRule) -> Result<Self> {
        if layout.len() != quadrature.dimension() {
            return Err(Error::DimensionMismatch {
                what: "quadrature dimension",
                expected: layout.len(),
                actual: quadrature.dimension(),
            });
        }
        if layout.iter().filter(|s| **s == RcSource::Price).count() > 1 {
            return Err(Error::Config("at most one random coefficient on price".into()));
        }
        Ok(Self { layout, quadrature })
    }

    /// Gauss-Hermite product rule of the given level over `layout`.
    pub fn with_level(layout: Vec<RcSource>, level: usize) -> Result<Self> {
        let q = QuadratureRule::gauss_hermite(level, layout.len())?;
        Self::new(layout, q)
    }

    pub fn layout(&self) -> &[RcSource] {
        &self.layout
    }

    pub fn quadrature(&self) -> &QuadratureRule {
        &self.quadrature
    }

    pub fn k_rc(&self) -> usize {
        self.layout.len()
    }

    /// Precompute the consumer-specific utility terms for a market at `theta`.
    pub fn kernel(&self, market: &MarketData, theta: &ThetaNonlinear) -> Result<MarketKernel> {
        self.kernel_at_prices(&market.demand_chars, &market.prices, theta)
    }

    /// As [`kernel`](Self::kernel), for arbitrary prices.
    pub fn kernel_at_prices(
        &self,
        demand_chars: &DMatrix<f64>,
        prices: &DVector<f64>,
        theta: &ThetaNonlinear,
    ) -> Result<MarketKernel> {
        theta.validate(self.k_rc())?;
        let n = prices.len();
        let nodes = self.quadrature.normal_nodes();
        let n_nodes = nodes.nrows();
        let mut hetero = DMatrix::zeros(n_nodes, n);
        let mut price_slope = DVector::from_element(n_nodes, theta.alpha);
        for (k, (src, &sigma)) in self.layout.iter().zip(&theta.sigma).enumerate() {
            if sigma == 0.0 {
                continue;
            }
            let column: DVector<f64> = match *src {
                RcSource::Demand(c) => {
                    if c >= demand_chars.ncols() {
                        return Err(Error::Config(format!(
                            "random coefficient on demand column {c}, but only {} columns",
                            demand_chars.ncols()
                        )));
                    }
                    demand_chars.column(c).into_owned()
                }
                RcSource::Price => {
                    for i in 0..n_nodes {
                        price_slope[i] += sigma * nodes[(i, k)];
                    }
                    prices.clone()
                }
            };
            for j in 0..n {
                let zj = column[j] * sigma;
                for i in 0..n_nodes {
                    hetero[(i, j)] += zj * nodes[(i, k)];
                }
            }
        }
        Ok(MarketKernel {
            hetero,
            price_slope,
            probabilities: self.quadrature.probabilities().clone(),
        })
    }

    pub fn compute_shares(
        &self,
        delta: &DVector<f64>,
        market: &MarketData,
        theta: &ThetaNonlinear,
    ) -> Result<DVector<f64>> {
        Ok(self.kernel(market, theta)?.shares(delta))
    }

    /// `(J_sp, J_sδ)` at `delta`.
    pub fn share_first_derivatives(
        &self,
        delta: &DVector<f64>,
        market: &MarketData,
        theta: &ThetaNonlinear,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let kernel = self.kernel(market, theta)?;
        let ns = kernel.node_shares(delta);
        Ok((kernel.j_sp(&ns), kernel.j_sdelta(&ns)))
    }

    /// Dense second-derivative tensors `(H_spp, H_spδ)`.
    pub fn share_hessians(
        &self,
        delta: &DVector<f64>,
        market: &MarketData,
        theta: &ThetaNonlinear,
    ) -> Result<(Tensor3, Tensor3)> {
        let kernel = self.kernel(market, theta)?;
        let ns = kernel.node_shares(delta);
        Ok(kernel.dense_hessians(&ns))
    }

    pub fn share_derivatives(
        &self,
        delta: &DVector<f64>,
        market: &MarketData,
        theta: &ThetaNonlinear,
    ) -> Result<ShareDerivatives> {
        let kernel = self.kernel(market, theta)?;
        let ns = kernel.node_shares(delta);
        let (h_spp, h_spdelta) = kernel.dense_hessians(&ns);
        Ok(ShareDerivatives {
            j_sp: kernel.j_sp(&ns),
            j_sdelta: kernel.j_sdelta(&ns),
            h_spp,
            h_spdelta,
        })
    }
}

/// Per-node logit shares, one row per quadrature node.
#[derive(Clone, Debug)]
pub struct NodeShares {
    pub per_node: DMatrix<f64>,
    pub shares: DVector<f64>,
}

/// A market's consumer heterogeneity at fixed `theta` and prices.
#[derive(Clone, Debug)]
pub struct MarketKernel {
    /// `n_nodes × N`: `Σ_k z_jk σ_k v_ik`.
    hetero: DMatrix<f64>,
    /// `∂V_ji/∂p_j = α + σ_price v_i,price`.
    price_slope: DVector<f64>,
    probabilities: DVector<f64>,
}

impl MarketKernel {
    pub fn n_products(&self) -> usize {
        self.hetero.ncols()
    }

    pub fn price_slope(&self) -> &DVector<f64> {
        &self.price_slope
    }

    pub fn probabilities(&self) -> &DVector<f64> {
        &self.probabilities
    }

    pub fn node_shares(&self, delta: &DVector<f64>) -> NodeShares {
        let (n_nodes, n) = self.hetero.shape();
        let mut per_node = DMatrix::zeros(n_nodes, n);
        let mut shares = DVector::zeros(n);
        let mut v = vec![0.0; n];
        for i in 0..n_nodes {
            let mut vmax = 0.0_f64; // outside good
            for j in 0..n {
                v[j] = delta[j] + self.hetero[(i, j)];
                vmax = vmax.max(v[j]);
            }
            let mut denom = (-vmax).exp();
            for vj in v.iter_mut() {
                *vj = (*vj - vmax).exp();
                denom += *vj;
            }
            let w = self.probabilities[i];
            for j in 0..n {
                let s = v[j] / denom;
                per_node[(i, j)] = s;
                shares[j] += w * s;
            }
        }
        NodeShares { per_node, shares }
    }

    pub fn shares(&self, delta: &DVector<f64>) -> DVector<f64> {
        self.node_shares(delta).shares
    }

    /// `Σ_i c_i (diag(s_i) − s_i s_iᵀ)` for node weights `c`.
    fn weighted_logit_jacobian(&self, ns: &NodeShares, c: &DVector<f64>) -> DMatrix<f64> {
        let s = &ns.per_node;
        let mut scaled = s.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= c[i];
        }
        let mut out = -s.tr_mul(&scaled);
        let diag = scaled.row_sum();
        for j in 0..s.ncols() {
            out[(j, j)] += diag[j];
        }
        out
    }

    pub fn j_sdelta(&self, ns: &NodeShares) -> DMatrix<f64> {
        self.weighted_logit_jacobian(ns, &self.probabilities)
    }

    pub fn j_sp(&self, ns: &NodeShares) -> DMatrix<f64> {
        let c = self.probabilities.component_mul(&self.price_slope);
        self.weighted_logit_jacobian(ns, &c)
    }

    /// Dense `H_spp` and `H_spδ`; `O(n_nodes · N³)`.
    pub fn dense_hessians(&self, ns: &NodeShares) -> (Tensor3, Tensor3) {
        let (n_nodes, n) = ns.per_node.shape();
        let mut hpp = Tensor3::zeros(n);
        let mut hpd = Tensor3::zeros(n);
        for i in 0..n_nodes {
            let a = self.price_slope[i];
            let wpp = self.probabilities[i] * a * a;
            let wpd = self.probabilities[i] * a;
            let s = ns.per_node.row(i);
            for k in 0..n {
                let sk = s[k];
                for j in 0..n {
                    let sj = s[j];
                    for l in 0..n {
                        let sl = s[l];
                        let mut h = 2.0 * sk * sj * sl;
                        if k == j {
                            h -= sk * sl;
                            if j == l {
                                h += sk;
                            }
                        }
                        if j == l {
                            h -= sk * sj;
                        }
                        if k == l {
                            h -= sk * sj;
                        }
                        hpp.add(k, j, l, wpp * h);
                        hpd.add(k, j, l, wpd * h);
                    }
                }
            }
        }
        (hpp, hpd)
    }

    /// Firm-restricted contractions of the share Hessians with markups:
    /// `Ξ_pp[j, l] = Σ_{k∈F(j)} m_k ∂²s_k/∂p_j∂p_l` and likewise `Ξ_pδ`,
    /// where `F(j) = {k : O[j, k] = 1}`. Costs `O(n_nodes · N²)` and never
    /// forms the dense tensors.
    pub fn markup_contracted_hessians(
        &self,
        ns: &NodeShares,
        markups: &DVector<f64>,
        ownership: &DMatrix<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let s = &ns.per_node;
        let (n_nodes, n) = s.shape();
        // M[i, j] = Σ_k O[j, k] m_k s_ik
        let mut sm = s.clone();
        for (k, mut col) in sm.column_iter_mut().enumerate() {
            col *= markups[k];
        }
        let big_m = sm * ownership.transpose();
        let ms = big_m.component_mul(s);

        let contract = |c: &DVector<f64>| {
            let mut scaled = s.clone();
            for (i, mut row) in scaled.row_iter_mut().enumerate() {
                row *= c[i];
            }
            let p = s.tr_mul(&scaled); // Σ c s sᵀ
            let r = ms.tr_mul(&scaled); // Σ c (M∘s) sᵀ
            let mut out = DMatrix::zeros(n, n);
            for l in 0..n {
                for j in 0..n {
                    let mut v = 2.0 * r[(j, l)] - markups[j] * p[(j, l)];
                    if ownership[(j, l)] != 0.0 {
                        v -= markups[l] * p[(j, l)];
                    }
                    out[(j, l)] = v;
                }
            }
            for j in 0..n {
                let mut d = 0.0;
                for i in 0..n_nodes {
                    d += c[i] * (s[(i, j)] * markups[j] - ms[(i, j)]);
                }
                out[(j, j)] += d;
            }
            out
        };
        let c_pd = self.probabilities.component_mul(&self.price_slope);
        let c_pp = c_pd.component_mul(&self.price_slope);
        (contract(&c_pp), contract(&c_pd))
    }
}
