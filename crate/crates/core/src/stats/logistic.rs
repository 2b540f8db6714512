//! Binomial logistic regression by iteratively reweighted least squares.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::design::{Design, Observation, RegressionSpec};
use super::{normal_p, StatsError, Z_95};

const GRAD_TOL: f64 = 1e-10;
const MAX_ITERS: usize = 100;
/// Any coefficient beyond this magnitude is treated as separation.
const SEPARATION_BOUND: f64 = 15.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogisticFit {
    pub columns: Vec<String>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub z: Vec<f64>,
    pub p: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub log_likelihood: f64,
    /// Hessian of the log-likelihood at the solution, row-major.
    pub hessian: Vec<Vec<f64>>,
}

impl LogisticFit {
    pub fn coef(&self, column: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == column)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct State {
    grad: DVector<f64>,
    info: DMatrix<f64>,
    loglik: f64,
}

fn state(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> State {
    let eta = x * beta;
    let (n, p) = x.shape();
    let mut grad = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    let mut loglik = 0.0;
    for i in 0..n {
        let mu = sigmoid(eta[i]);
        let w = mu * (1.0 - mu);
        let xi = x.row(i).transpose();
        grad += &xi * (y[i] - mu);
        info += w * &xi * xi.transpose();
        // log(1 + e^eta) computed stably
        let softplus = if eta[i] > 0.0 {
            eta[i] + (-eta[i]).exp().ln_1p()
        } else {
            eta[i].exp().ln_1p()
        };
        loglik += y[i] * eta[i] - softplus;
    }
    State { grad, info, loglik }
}

/// Fits `logit P(y = 1) = Xβ`. Observation outcomes are read from `y`
/// (`> 0.5` counts as success); any random-intercept term is ignored.
pub fn fit_logistic(spec: &RegressionSpec, data: &[Observation]) -> Result<LogisticFit, StatsError> {
    let mut fixed = spec.clone();
    fixed.random_intercept = None;
    let d = Design::build(&fixed, data)?;
    let successes = data.iter().filter(|o| o.y > 0.5).count();
    if successes == 0 || successes == data.len() {
        return Err(StatsError::SingleClassOutcome);
    }
    d.check_rank()?;
    let y = d.y.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let p = d.x.ncols();
    let mut beta = DVector::zeros(p);
    let mut st = state(&d.x, &y, &beta);
    let mut iterations = 0;
    let mut converged = st.grad.norm() < GRAD_TOL;
    while !converged && iterations < MAX_ITERS {
        iterations += 1;
        let Some(chol) = st.info.clone().cholesky() else {
            return Err(StatsError::CompleteSeparation);
        };
        beta += chol.solve(&st.grad);
        if beta.iter().any(|b| !b.is_finite() || b.abs() > SEPARATION_BOUND) {
            return Err(StatsError::CompleteSeparation);
        }
        st = state(&d.x, &y, &beta);
        converged = st.grad.norm() < GRAD_TOL;
    }
    let cov = st
        .info
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(StatsError::CompleteSeparation)?;
    let mut se = Vec::with_capacity(p);
    let mut z = Vec::with_capacity(p);
    let mut pv = Vec::with_capacity(p);
    let mut lo = Vec::with_capacity(p);
    let mut hi = Vec::with_capacity(p);
    for j in 0..p {
        let s = cov[(j, j)].max(0.0).sqrt();
        let zj = if s > 0.0 { beta[j] / s } else { 0.0 };
        se.push(s);
        z.push(zj);
        pv.push(normal_p(zj));
        lo.push(beta[j] - Z_95 * s);
        hi.push(beta[j] + Z_95 * s);
    }
    Ok(LogisticFit {
        columns: d.columns,
        beta: beta.iter().copied().collect(),
        se,
        z,
        p: pv,
        ci_low: lo,
        ci_high: hi,
        converged,
        iterations,
        gradient_norm: st.grad.norm(),
        log_likelihood: st.loglik,
        hessian: (0..p).map(|i| (0..p).map(|j| -st.info[(i, j)]).collect()).collect(),
    })
}
