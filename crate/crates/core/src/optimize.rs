//! Box-constrained quasi-Newton minimization with finite-difference
//! derivatives, and the multi-start sampler.

use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub max_iters: usize,
    /// Bound on the max-abs projected gradient.
    pub grad_tol: f64,
    /// Relative central-difference step for the gradient.
    pub fd_step: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_iters: 200,
            grad_tol: 1e-5,
            fd_step: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub projected_gradient: f64,
}

/// Per-coordinate lower bounds; `f64::NEG_INFINITY` for unbounded.
#[derive(Clone, Debug)]
pub struct Bounds {
    pub lower: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
        }
    }

    pub fn project(&self, x: &mut DVector<f64>) {
        for (v, l) in x.iter_mut().zip(&self.lower) {
            if *v < *l {
                *v = *l;
            }
        }
    }
}

fn fd_step(x: f64, rel: f64) -> f64 {
    rel * x.abs().max(1.0)
}

/// Central-difference gradient; forward difference where a central step would
/// cross a lower bound.
pub fn fd_gradient(
    f: &mut impl FnMut(&[f64]) -> f64,
    x: &[f64],
    fx: f64,
    rel: f64,
    bounds: &Bounds,
    evaluations: &mut usize,
) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = fd_step(x[i], rel);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        *evaluations += 1;
        if x[i] - h >= bounds.lower[i] {
            xp[i] = x[i] - h;
            let fm = f(&xp);
            *evaluations += 1;
            g[i] = (fp - fm) / (2.0 * h);
        } else {
            g[i] = (fp - fx) / h;
        }
        xp[i] = x[i];
    }
    g
}

/// Central-difference Hessian with per-coordinate step `rel·max(|x_i|, 1)`.
pub fn fd_hessian(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], rel: f64) -> DMatrix<f64> {
    let h: Vec<f64> = x.iter().map(|&v| fd_step(v, rel)).collect();
    fd_hessian_with_steps(f, x, &h)
}

/// Central-difference Hessian with explicit per-coordinate steps.
pub fn fd_hessian_with_steps(
    f: &mut impl FnMut(&[f64]) -> f64,
    x: &[f64],
    h: &[f64],
) -> DMatrix<f64> {
    let n = x.len();
    let f0 = f(x);
    let mut at = |moves: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(i, d) in moves {
            y[i] += d;
        }
        f(&y)
    };
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        let fp = at(&[(i, h[i])]);
        let fm = at(&[(i, -h[i])]);
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let fpp = at(&[(i, h[i]), (j, h[j])]);
            let fpm = at(&[(i, h[i]), (j, -h[j])]);
            let fmp = at(&[(i, -h[i]), (j, h[j])]);
            let fmm = at(&[(i, -h[i]), (j, -h[j])]);
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Whether central-difference gradients at two relative steps agree to
/// `rtol` relative (per coordinate, against the larger magnitude, floored at 1).
pub fn gradient_is_stable(
    f: &mut impl FnMut(&[f64]) -> f64,
    x: &[f64],
    steps: (f64, f64),
    rtol: f64,
) -> bool {
    let bounds = Bounds::unbounded(x.len());
    let fx = f(x);
    let mut evals = 0;
    let g1 = fd_gradient(f, x, fx, steps.0, &bounds, &mut evals);
    let g2 = fd_gradient(f, x, fx, steps.1, &bounds, &mut evals);
    g1.iter()
        .zip(g2.iter())
        .all(|(a, b)| (a - b).abs() <= rtol * a.abs().max(b.abs()).max(1.0))
}

fn projected_gradient_norm(x: &DVector<f64>, g: &DVector<f64>, bounds: &Bounds) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..x.len() {
        let stepped = (x[i] - g[i]).max(bounds.lower[i]);
        m = m.max((x[i] - stepped).abs());
    }
    m
}

fn safe_gradient(
    eval: &mut impl FnMut(&[f64], &mut usize) -> f64,
    x: &DVector<f64>,
    fx: f64,
    rel: f64,
    bounds: &Bounds,
    count: &mut usize,
) -> DVector<f64> {
    let mut inner = 0;
    let mut g = fd_gradient(&mut |y: &[f64]| eval(y, &mut inner), x.as_slice(), fx, rel, bounds, count);
    for v in g.iter_mut() {
        if !v.is_finite() {
            *v = 0.0;
        }
    }
    g
}

/// Projected BFGS with Armijo backtracking. Non-finite objective values are
/// treated as `+∞` so the line search retreats from them.
pub fn minimize(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    bounds: &Bounds,
    settings: &OptimizerSettings,
) -> Option<OptimizeResult> {
    let n = x0.len();
    let mut eval = |x: &[f64], count: &mut usize| {
        *count += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut evaluations = 0;
    let mut x = DVector::from_column_slice(x0);
    bounds.project(&mut x);
    let mut fx = eval(x.as_slice(), &mut evaluations);
    if !fx.is_finite() {
        return None;
    }
    let mut g = safe_gradient(&mut eval, &x, fx, settings.fd_step, bounds, &mut evaluations);
    let mut h_inv: Option<DMatrix<f64>> = None;
    let mut iterations = 0;
    let mut pg = projected_gradient_norm(&x, &g, bounds);

    while iterations < settings.max_iters && pg > settings.grad_tol {
        iterations += 1;
        // coordinates pinned at their bound with the gradient pushing outward
        let active: Vec<bool> = (0..n)
            .map(|i| x[i] <= bounds.lower[i] && g[i] > 0.0)
            .collect();
        let scale = 1.0 / g.amax().max(1.0);
        let b = h_inv
            .clone()
            .unwrap_or_else(|| DMatrix::identity(n, n) * scale);
        let mut d = -(&b * &g);
        for i in 0..n {
            if active[i] {
                d[i] = 0.0;
            }
        }
        if g.dot(&d) >= 0.0 {
            h_inv = None;
            d = -&g * scale;
            for i in 0..n {
                if active[i] {
                    d[i] = 0.0;
                }
            }
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial = &x + &d * t;
            bounds.project(&mut trial);
            let step = &trial - &x;
            let ft = eval(trial.as_slice(), &mut evaluations);
            if ft <= fx + 1e-4 * g.dot(&step) && ft.is_finite() {
                accepted = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            if h_inv.is_some() {
                h_inv = None;
                continue;
            }
            break;
        };
        let g_new = safe_gradient(&mut eval, &x_new, f_new, settings.fd_step, bounds, &mut evaluations);
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let base = h_inv
                .take()
                .unwrap_or_else(|| DMatrix::identity(n, n) * (sy / y.dot(&y)));
            let eye = DMatrix::<f64>::identity(n, n);
            let left = &eye - &s * y.transpose() * rho;
            let right = &eye - &y * s.transpose() * rho;
            h_inv = Some(&left * base * &right + &s * s.transpose() * rho);
        }
        let small_step = s.amax() <= 1e-12 * x.amax().max(1.0);
        x = x_new;
        fx = f_new;
        g = g_new;
        pg = projected_gradient_norm(&x, &g, bounds);
        if small_step && h_inv.is_none() {
            break;
        }
    }
    Some(OptimizeResult {
        x: x.iter().copied().collect(),
        f: fx,
        iterations,
        evaluations,
        converged: pg <= settings.grad_tol,
        projected_gradient: pg,
    })
}

/// `count` points drawn uniformly within `center ± max(rel·|center|, floor)`
/// per coordinate, clamped to the bounds.
pub fn draw_starts(
    center: &[f64],
    count: usize,
    rel: f64,
    floor: f64,
    bounds: &Bounds,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed);
    (0..count)
        .map(|_| {
            center
                .iter()
                .zip(&bounds.lower)
                .map(|(&c, &l)| {
                    let half = (rel * c.abs()).max(floor);
                    let v = c + r.random_range(-half..half);
                    v.max(l)
                })
                .collect()
        })
        .collect()
}
