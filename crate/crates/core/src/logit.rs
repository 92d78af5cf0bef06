//! Weighted logistic IRWLS with step-halving.
//!
//! Both the survey propensity fit and the inverse-propensity arrest equation
//! reduce to maximizing `Σ w_i [y_i η_i − log(1 + e^{η_i})]` with `y_i ∈ [0,1]`
//! and `w_i > 0`: the survey fit uses `(y, w) = (r, weight)` and the arrest
//! equation uses `(y, w) = (a·π̂, 1/π̂)`, whose gradient is `Σ (a − q/π̂) x`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_outer_lower, dot_row, expit, fill_upper, is_well_conditioned, log1pexp, max_abs};

/// ln(1e10): linear predictors beyond this put a fitted probability within 1e-10 of 0 or 1.
const BOUNDARY_ETA: f64 = 23.025850929940457;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Relative coefficient change that declares convergence.
    pub tolerance: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tolerance: 1e-8,
            max_iter: 100,
            max_halvings: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LogitSolution {
    pub beta: DVector<f64>,
    pub iterations: usize,
}

pub(crate) fn objective(x: &DMatrix<f64>, y: &[f64], w: &[f64], beta: &DVector<f64>) -> f64 {
    let mut ll = 0.0;
    for i in 0..x.nrows() {
        let eta = dot_row(x, i, beta);
        ll += w[i] * (y[i] * eta - log1pexp(eta));
    }
    ll
}

/// Gradient `Σ w (y − p) x` and information `Σ w p(1−p) x xᵀ`.
pub(crate) fn score_and_information(
    x: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    beta: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = x.ncols();
    let mut g = DVector::zeros(d);
    let mut h = DMatrix::zeros(d, d);
    for i in 0..x.nrows() {
        let p = expit(dot_row(x, i, beta));
        let r = w[i] * (y[i] - p);
        for a in 0..d {
            g[a] += r * x[(i, a)];
        }
        add_outer_lower(&mut h, x, i, w[i] * p * (1.0 - p));
    }
    fill_upper(&mut h);
    (g, h)
}

pub(crate) fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let d = x.ncols();
    let mut h = DMatrix::zeros(d, d);
    for i in 0..x.nrows() {
        add_outer_lower(&mut h, x, i, w[i]);
    }
    fill_upper(&mut h);
    h
}

fn max_linear_predictor(x: &DMatrix<f64>, beta: &DVector<f64>) -> f64 {
    (0..x.nrows())
        .map(|i| dot_row(x, i, beta).abs())
        .fold(0.0, f64::max)
}

fn covariate_bound(x: &DMatrix<f64>) -> f64 {
    x.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0)
}

pub(crate) fn fit_weighted_logistic(
    x: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    init: Option<&DVector<f64>>,
    cfg: &SolverConfig,
) -> Result<LogitSolution> {
    let (n, d) = x.shape();
    if y.len() != n || w.len() != n {
        return Err(Error::InvalidInput(format!(
            "design has {n} rows but {} outcomes and {} weights",
            y.len(),
            w.len()
        )));
    }
    if n < d {
        return Err(Error::SingularDesign);
    }
    if !is_well_conditioned(&weighted_gram(x, w)) {
        return Err(Error::SingularDesign);
    }
    // ‖β‖∞ beyond 1e3 / M means |η| of order 1e3: no finite maximizer.
    let norm_bound = 1e3 / covariate_bound(x);

    let mut beta = init.cloned().unwrap_or_else(|| DVector::zeros(d));
    let mut ll = objective(x, y, w, &beta);
    let mut last_change = f64::INFINITY;
    for iter in 1..=cfg.max_iter {
        let (g, h) = score_and_information(x, y, w, &beta);
        let step = match h.clone().cholesky() {
            Some(chol) => chol.solve(&g),
            None => {
                if max_linear_predictor(x, &beta) > BOUNDARY_ETA {
                    return Err(Error::Separation(
                        "information matrix degenerate at boundary probabilities".into(),
                    ));
                }
                return Err(Error::SingularDesign);
            }
        };
        let mut scale = 1.0;
        let mut candidate = &beta + &step;
        let mut ll_new = objective(x, y, w, &candidate);
        let slack = 1e-12 * (ll.abs() + 1.0);
        let mut halvings = 0;
        while !(ll_new >= ll - slack) && halvings < cfg.max_halvings {
            scale *= 0.5;
            candidate = &beta + &step * scale;
            ll_new = objective(x, y, w, &candidate);
            halvings += 1;
        }
        last_change = max_abs(&(&step * scale)) / (1.0 + max_abs(&beta));
        beta = candidate;
        ll = ll_new;
        if max_abs(&beta) > norm_bound {
            return Err(Error::Separation(format!(
                "coefficient norm exceeded {norm_bound:.3e}"
            )));
        }
        if last_change < cfg.tolerance {
            if max_linear_predictor(x, &beta) > BOUNDARY_ETA {
                return Err(Error::Separation(
                    "fitted probability within 1e-10 of 0 or 1".into(),
                ));
            }
            return Ok(LogitSolution {
                beta,
                iterations: iter,
            });
        }
    }
    if max_linear_predictor(x, &beta) > BOUNDARY_ETA {
        return Err(Error::Separation(
            "fitted probability within 1e-10 of 0 or 1".into(),
        ));
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_iter,
        last_change,
    })
}
