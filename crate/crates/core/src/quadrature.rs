//! Gauss-Hermite product rules for integrating over standard-normal random
//! coefficients.
//!
//! The one-dimensional rule integrates `∫ e^{-x²} f(x) dx` exactly for
//! polynomials of degree `2·level − 1`. Substituting `v = √2·x` turns it into an
//! expectation under `N(0, 1)` once the weights are scaled by `π^{-1/2}` per
//! dimension.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default number of nodes per random-coefficient dimension.
pub const DEFAULT_LEVEL: usize = 7;

/// Default upper bound on the size of a product rule.
pub const DEFAULT_NODE_CAP: usize = 1_000_000;

#[derive(Clone, Debug)]
pub struct QuadratureRule {
    nodes: DMatrix<f64>,
    weights: DVector<f64>,
    normalizer: f64,
    // cached forms used by the share kernels
    normal_nodes: DMatrix<f64>,
    probabilities: DVector<f64>,
}

impl QuadratureRule {
    /// Tensor-product Gauss-Hermite rule with `level` nodes per dimension.
    pub fn gauss_hermite(level: usize, k_rc: usize) -> Result<Self> {
        Self::gauss_hermite_capped(level, k_rc, DEFAULT_NODE_CAP)
    }

    pub fn gauss_hermite_capped(level: usize, k_rc: usize, cap: usize) -> Result<Self> {
        if level == 0 || k_rc == 0 {
            return Err(Error::Config(format!(
                "quadrature needs level >= 1 and k_rc >= 1 (got level={level}, k_rc={k_rc})"
            )));
        }
        let n_nodes = u32::try_from(k_rc)
            .ok()
            .and_then(|k| level.checked_pow(k))
            .filter(|&n| n <= cap)
            .ok_or_else(|| {
                Error::Config(format!(
                    "product rule with {level}^{k_rc} nodes exceeds the cap of {cap}"
                ))
            })?;

        let (x1, w1) = hermite_1d(level);
        let mut nodes = DMatrix::zeros(n_nodes, k_rc);
        let mut weights = DVector::zeros(n_nodes);
        for i in 0..n_nodes {
            // last dimension varies fastest
            let mut rest = i;
            let mut w = 1.0;
            for d in (0..k_rc).rev() {
                let idx = rest % level;
                rest /= level;
                nodes[(i, d)] = x1[idx];
                w *= w1[idx];
            }
            weights[i] = w;
        }
        let normalizer = PI.powf(-(k_rc as f64) / 2.0);
        Ok(Self::from_parts(nodes, weights, normalizer))
    }

    fn from_parts(nodes: DMatrix<f64>, weights: DVector<f64>, normalizer: f64) -> Self {
        let normal_nodes = &nodes * SQRT_2;
        let probabilities = &weights * normalizer;
        Self {
            nodes,
            weights,
            normalizer,
            normal_nodes,
            probabilities,
        }
    }

    /// Hermite abscissae, one row per node.
    pub fn nodes(&self) -> &DMatrix<f64> {
        &self.nodes
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// `π^{-K/2}`.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    /// Nodes after the change of variables: draws from `N(0, I)`.
    pub fn normal_nodes(&self) -> &DMatrix<f64> {
        &self.normal_nodes
    }

    /// `normalizer · weights`; these sum to one.
    pub fn probabilities(&self) -> &DVector<f64> {
        &self.probabilities
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.nrows()
    }

    pub fn dimension(&self) -> usize {
        self.nodes.ncols()
    }

    /// Expectation of `f(v)` for `v ~ N(0, I)` under this rule.
    pub fn expectation(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        let k = self.dimension();
        let mut buf = vec![0.0; k];
        let mut total = 0.0;
        for i in 0..self.n_nodes() {
            for (d, b) in buf.iter_mut().enumerate() {
                *b = self.normal_nodes[(i, d)];
            }
            total += self.probabilities[i] * f(&buf);
        }
        total
    }
}

/// Nodes (ascending) and weights of the `n`-point rule for weight `e^{-x²}`,
/// by Newton iteration on the orthonormal Hermite recurrence.
fn hermite_1d(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // π^{-1/4}
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let half = n.div_ceil(2);
    let mut z = 0.0_f64;
    for i in 0..half {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        for _ in 0..100 {
            let (p1, p2) = hermite_pair(n, z, PIM4);
            let pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        let root = if n % 2 == 1 && i == half - 1 { 0.0 } else { z };
        let (_, p2) = hermite_pair(n, root, PIM4);
        let pp = (2.0 * nf).sqrt() * p2;
        x[i] = root;
        x[n - 1 - i] = -root;
        let wi = 2.0 / (pp * pp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    x.reverse();
    w.reverse();
    (x, w)
}

fn hermite_pair(n: usize, z: f64, p0: f64) -> (f64, f64) {
    let mut p1 = p0;
    let mut p2 = 0.0;
    for j in 1..=n {
        let jf = j as f64;
        let p3 = p2;
        p2 = p1;
        p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
    }
    (p1, p2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normal_moment(k: u32) -> f64 {
        if k % 2 == 1 {
            return 0.0;
        }
        // (k-1)!!
        (1..k).step_by(2).map(f64::from).product()
    }

    #[test]
    fn single_node_rule_is_the_origin() {
        let q = QuadratureRule::gauss_hermite(1, 1).unwrap();
        assert_eq!(q.n_nodes(), 1);
        assert_eq!(q.nodes()[(0, 0)], 0.0);
        assert!((q.normalizer() * q.weights()[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn product_rule_counts_and_normalizes() {
        let q = QuadratureRule::gauss_hermite(7, 2).unwrap();
        assert_eq!(q.n_nodes(), 49);
        assert!((q.normalizer() * q.weights().sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn second_moment_of_standard_normal() {
        let q = QuadratureRule::gauss_hermite(7, 1).unwrap();
        let m2: f64 = (0..7)
            .map(|i| q.normalizer() * q.weights()[i] * (SQRT_2 * q.nodes()[(i, 0)]).powi(2))
            .sum();
        assert!((m2 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn reproduces_gaussian_moments_up_to_degree() {
        for level in 1..=12 {
            let q = QuadratureRule::gauss_hermite(level, 1).unwrap();
            for k in 0..(2 * level as u32) {
                let got = q.expectation(|v| v[0].powi(k as i32));
                let want = normal_moment(k);
                // odd moments cancel between mirrored nodes; rounding scales with E|v|^k
                let scale = q.expectation(|v| v[0].abs().powi(k as i32)).max(1.0);
                let tol = if k % 2 == 1 { 1e-14 * scale } else { 1e-8 * scale };
                assert!(
                    (got - want).abs() <= tol,
                    "level {level} moment {k}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn mixed_moments_in_two_dimensions() {
        let q = QuadratureRule::gauss_hermite(5, 2).unwrap();
        let got = q.expectation(|v| v[0] * v[0] * v[1] * v[1] * v[1] * v[1]);
        assert!((got - 3.0).abs() < 1e-10);
        let odd = q.expectation(|v| v[0] * v[1] * v[1]);
        assert!(odd.abs() < 1e-14);
    }

    #[test]
    fn node_set_is_symmetric() {
        let q = QuadratureRule::gauss_hermite(6, 2).unwrap();
        let n = q.n_nodes();
        for d in 0..2 {
            for i in 0..n {
                let mut target: Vec<f64> = (0..2).map(|c| q.nodes()[(i, c)]).collect();
                target[d] = -target[d];
                let found = (0..n).any(|k| {
                    (0..2).all(|c| q.nodes()[(k, c)] == target[c])
                        && q.weights()[k] == q.weights()[i]
                });
                assert!(found, "node {i} has no mirror in dimension {d}");
            }
        }
    }

    #[test]
    fn rejects_oversized_rules() {
        assert!(matches!(
            QuadratureRule::gauss_hermite(10, 7),
            Err(Error::Config(_))
        ));
        assert!(QuadratureRule::gauss_hermite_capped(3, 2, 8).is_err());
        assert!(QuadratureRule::gauss_hermite(0, 1).is_err());
        assert!(QuadratureRule::gauss_hermite(3, 0).is_err());
    }
}
