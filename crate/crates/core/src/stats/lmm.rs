//! Random-intercept linear mixed model fit by maximum likelihood.
//!
//! With `λ = σ²_group / σ²_residual` the marginal covariance is
//! `σ² (I + λ Z Zᵀ)`, block-diagonal per group with inverse
//! `I − λ/(1 + λ n_g) 11ᵀ`. For fixed λ the GLS coefficients and the ML
//! residual variance have closed forms, leaving a 1-D search over `log λ`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::design::{Design, Observation, RegressionSpec};
use super::{normal_p, StatsError, Z_95};

pub const LOG_LAMBDA_MIN: f64 = -12.0;
pub const LOG_LAMBDA_MAX: f64 = 12.0;
pub const GRID_POINTS: usize = 101;
const SEARCH_TOL: f64 = 1e-8;
const MAX_GOLDEN_ITERS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmmFit {
    pub columns: Vec<String>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub t: Vec<f64>,
    pub p: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub sigma2_group: f64,
    pub sigma2_residual: f64,
    pub lambda: f64,
    pub log_likelihood: f64,
    pub n: usize,
    pub groups: usize,
    /// Set when the fit fell back to ordinary least squares.
    pub warnings: Vec<String>,
    /// How p values were obtained.
    pub df_method: &'static str,
}

impl LmmFit {
    pub fn coef(&self, column: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == column)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LmmOptions {
    /// Skip the search and fit at this variance ratio.
    pub fixed_lambda: Option<f64>,
}

struct Profile {
    beta: DVector<f64>,
    xtvx_inv: DMatrix<f64>,
    sigma2: f64,
    loglik: f64,
}

struct Blocks {
    sizes: Vec<f64>,
    /// Column sums of X per group.
    x_sums: Vec<DVector<f64>>,
    y_sums: Vec<f64>,
}

fn blocks(d: &Design) -> Blocks {
    let g = d.group_labels.len();
    let p = d.x.ncols();
    let mut sizes = vec![0.0; g];
    let mut x_sums = vec![DVector::zeros(p); g];
    let mut y_sums = vec![0.0; g];
    for (i, &gi) in d.groups.iter().enumerate() {
        sizes[gi] += 1.0;
        x_sums[gi] += d.x.row(i).transpose();
        y_sums[gi] += d.y[i];
    }
    Blocks { sizes, x_sums, y_sums }
}

fn profile(d: &Design, b: &Blocks, lambda: f64) -> Option<Profile> {
    let n = d.x.nrows() as f64;
    let mut xtvx = d.x.transpose() * &d.x;
    let mut xtvy = d.x.transpose() * &d.y;
    let mut logdet = 0.0;
    for g in 0..b.sizes.len() {
        let c = lambda / (1.0 + lambda * b.sizes[g]);
        xtvx -= c * &b.x_sums[g] * b.x_sums[g].transpose();
        xtvy -= c * b.y_sums[g] * &b.x_sums[g];
        logdet += (1.0 + lambda * b.sizes[g]).ln();
    }
    let chol = xtvx.cholesky()?;
    let beta = chol.solve(&xtvy);
    let resid = &d.y - &d.x * &beta;
    let mut quad = resid.norm_squared();
    let mut rsum = vec![0.0; b.sizes.len()];
    for (i, &g) in d.groups.iter().enumerate() {
        rsum[g] += resid[i];
    }
    for (size, r) in b.sizes.iter().zip(&rsum) {
        quad -= lambda / (1.0 + lambda * size) * r * r;
    }
    let sigma2 = quad / n;
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return None;
    }
    let loglik = -0.5 * n * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0) - 0.5 * logdet;
    Some(Profile {
        beta,
        xtvx_inv: chol.inverse(),
        sigma2,
        loglik,
    })
}

/// Profile log-likelihood at `lambda`, or `None` where it is undefined.
pub fn profile_log_likelihood(spec: &RegressionSpec, data: &[Observation], lambda: f64) -> Option<f64> {
    let d = Design::build(spec, data).ok()?;
    profile(&d, &blocks(&d), lambda).map(|p| p.loglik)
}

pub fn fit_lmm(spec: &RegressionSpec, data: &[Observation]) -> Result<LmmFit, StatsError> {
    fit_lmm_with(spec, data, LmmOptions::default())
}

pub fn fit_lmm_with(
    spec: &RegressionSpec,
    data: &[Observation],
    opts: LmmOptions,
) -> Result<LmmFit, StatsError> {
    let d = Design::build(spec, data)?;
    d.check_rank()?;
    let g = d.group_labels.len();
    if g < 2 {
        return Err(StatsError::TooFewGroups(g));
    }
    let b = blocks(&d);
    let mut warnings = Vec::new();

    let (lambda, prof) = if let Some(l) = opts.fixed_lambda {
        (l, profile(&d, &b, l).ok_or(StatsError::NonConvergence)?)
    } else if b.sizes.iter().all(|&s| s <= 1.0) {
        warnings.push("one observation per group: variance ratio unidentifiable, OLS fit".into());
        (0.0, profile(&d, &b, 0.0).ok_or(StatsError::NonConvergence)?)
    } else {
        search(&d, &b)?
    };

    let p = d.x.ncols();
    let mut se = Vec::with_capacity(p);
    let mut t = Vec::with_capacity(p);
    let mut pv = Vec::with_capacity(p);
    let mut lo = Vec::with_capacity(p);
    let mut hi = Vec::with_capacity(p);
    for j in 0..p {
        let s = (prof.sigma2 * prof.xtvx_inv[(j, j)]).max(0.0).sqrt();
        let bj = prof.beta[j];
        let tj = if s > 0.0 { bj / s } else { 0.0 };
        se.push(s);
        t.push(tj);
        pv.push(normal_p(tj));
        lo.push(bj - Z_95 * s);
        hi.push(bj + Z_95 * s);
    }
    Ok(LmmFit {
        columns: d.columns.clone(),
        beta: prof.beta.iter().copied().collect(),
        se,
        t,
        p: pv,
        ci_low: lo,
        ci_high: hi,
        sigma2_group: lambda * prof.sigma2,
        sigma2_residual: prof.sigma2,
        lambda,
        log_likelihood: prof.loglik,
        n: d.x.nrows(),
        groups: g,
        warnings,
        df_method: "normal approximation",
    })
}

/// Grid over `log λ`, golden-section refinement around the best grid point,
/// and an explicit check of the `λ = 0` boundary.
fn search(d: &Design, b: &Blocks) -> Result<(f64, Profile), StatsError> {
    let eval = |u: f64| profile(d, b, u.exp()).map(|p| p.loglik).unwrap_or(f64::NEG_INFINITY);
    let step = (LOG_LAMBDA_MAX - LOG_LAMBDA_MIN) / (GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..GRID_POINTS).map(|i| LOG_LAMBDA_MIN + step * i as f64).collect();
    let values: Vec<f64> = grid.iter().map(|&u| eval(u)).collect();
    let (best_i, _) = values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    if !values[best_i].is_finite() {
        return Err(StatsError::NonConvergence);
    }
    let mut best_u = grid[best_i];
    let mut best_v = values[best_i];
    let mut lo = grid[best_i.saturating_sub(1)];
    let mut hi = grid[(best_i + 1).min(GRID_POINTS - 1)];
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - phi * (hi - lo);
    let mut e = lo + phi * (hi - lo);
    let (mut fc, mut fe) = (eval(c), eval(e));
    let mut iters = 0;
    while hi - lo > SEARCH_TOL {
        iters += 1;
        if iters > MAX_GOLDEN_ITERS {
            return Err(StatsError::NonConvergence);
        }
        if fc >= fe {
            hi = e;
            e = c;
            fe = fc;
            c = hi - phi * (hi - lo);
            fc = eval(c);
        } else {
            lo = c;
            c = e;
            fc = fe;
            e = lo + phi * (hi - lo);
            fe = eval(e);
        }
        for (u, v) in [(c, fc), (e, fe)] {
            if v > best_v {
                best_u = u;
                best_v = v;
            }
        }
    }
    let lambda = best_u.exp();
    if best_i == 0 {
        if let Some(p0) = profile(d, b, 0.0) {
            if p0.loglik >= best_v {
                return Ok((0.0, p0));
            }
        }
    }
    let prof = profile(d, b, lambda).ok_or(StatsError::NonConvergence)?;
    Ok((lambda, prof))
}
