use kflow_core::stats::{
    fit_lmm, fit_lmm_with, fit_logistic, profile_log_likelihood, LmmOptions, Observation, RegressionSpec,
    GRID_POINTS, LOG_LAMBDA_MAX, LOG_LAMBDA_MIN,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Condition + task data with participant intercepts.
fn panel(participants: usize, beta_c: f64, sd_u: f64, sd_e: f64, seed: u64) -> Vec<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Normal::new(0.0, sd_u).unwrap();
    let e = Normal::new(0.0, sd_e).unwrap();
    let mut out = Vec::new();
    for p in 0..participants {
        let up = u.sample(&mut rng);
        for (c, shift) in [("baseline", 0.0), ("goldmind", beta_c)] {
            let task = if (p + usize::from(c == "goldmind")) % 2 == 0 { "t1" } else { "t2" };
            let t_eff = if task == "t2" { 0.3 } else { 0.0 };
            out.push(Observation::new(
                1.0 + shift + t_eff + up + e.sample(&mut rng),
                &format!("p{p:03}"),
                &[("condition", c), ("task", task)],
            ));
        }
    }
    out
}

fn ols(data: &[Observation]) -> DVector<f64> {
    let x = DMatrix::from_fn(data.len(), 3, |i, j| match j {
        0 => 1.0,
        1 => f64::from(u8::from(data[i].factors["condition"] == "goldmind")),
        _ => f64::from(u8::from(data[i].factors["task"] == "t2")),
    });
    let y = DVector::from_iterator(data.len(), data.iter().map(|o| o.y));
    (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * y))
}

fn spec() -> RegressionSpec {
    RegressionSpec::condition_task("y").with_reference("condition", "baseline").with_reference("task", "t1")
}

#[test]
fn zero_variance_ratio_is_ols() {
    let data = panel(20, -0.5, 1.0, 0.5, 3);
    let fit = fit_lmm_with(&spec(), &data, LmmOptions { fixed_lambda: Some(0.0) }).unwrap();
    let b = ols(&data);
    assert_eq!(fit.columns, vec!["(Intercept)", "condition[goldmind]", "task[t2]"]);
    for j in 0..3 {
        assert!((fit.beta[j] - b[j]).abs() < 1e-8, "{j}: {} vs {}", fit.beta[j], b[j]);
    }
}

#[test]
fn monte_carlo_recovers_condition_effect() {
    let data = panel(60, -0.5, 1.0, 0.3, 42);
    let fit = fit_lmm(&spec(), &data).unwrap();
    let j = fit.coef("condition[goldmind]").unwrap();
    assert!((fit.beta[j] + 0.5).abs() < 0.1, "beta {}", fit.beta[j]);
    assert!(fit.ci_low[j] <= -0.5 && -0.5 <= fit.ci_high[j]);
}

#[test]
fn search_beats_every_grid_point() {
    for seed in 0..5 {
        let data = panel(15, -0.5, [0.0, 0.2, 1.0, 3.0, 0.5][seed as usize], 0.5, seed);
        let fit = fit_lmm(&spec(), &data).unwrap();
        let step = (LOG_LAMBDA_MAX - LOG_LAMBDA_MIN) / (GRID_POINTS - 1) as f64;
        let mut candidates = vec![0.0];
        candidates.extend((0..GRID_POINTS).map(|i| (LOG_LAMBDA_MIN + step * i as f64).exp()));
        for l in candidates {
            if let Some(ll) = profile_log_likelihood(&spec(), &data, l) {
                assert!(fit.log_likelihood >= ll - 1e-9, "seed {seed}: λ={l} gives {ll} > {}", fit.log_likelihood);
            }
        }
    }
}

fn loglik(data: &[Observation], b: &[f64]) -> f64 {
    data.iter()
        .map(|o| {
            let x = f64::from(u8::from(o.factors["condition"] == "goldmind"));
            let eta = b[0] + b[1] * x;
            o.y * eta - (1.0 + eta.exp()).ln()
        })
        .sum()
}

fn binary(counts: [usize; 4]) -> Vec<Observation> {
    let mut out = Vec::new();
    for (k, &n) in counts.iter().enumerate() {
        let cond = if k < 2 { "goldmind" } else { "baseline" };
        let y = if k % 2 == 0 { 1.0 } else { 0.0 };
        for i in 0..n {
            out.push(Observation::new(y, &format!("{cond}{k}{i}"), &[("condition", cond)]));
        }
    }
    out
}

proptest! {
    #[test]
    fn logistic_solution_is_a_stationary_maximum(counts in prop::array::uniform4(1usize..40)) {
        let data = binary(counts);
        let s = RegressionSpec::logistic_condition("y").with_reference("condition", "baseline");
        let fit = fit_logistic(&s, &data).unwrap();
        prop_assert!(fit.converged);
        let b = fit.beta.clone();
        prop_assert!((loglik(&data, &b) - fit.log_likelihood).abs() < 1e-8);
        let h = 1e-4;
        for j in 0..2 {
            let mut up = b.clone();
            let mut dn = b.clone();
            up[j] += h;
            dn[j] -= h;
            let g = (loglik(&data, &up) - loglik(&data, &dn)) / (2.0 * h);
            prop_assert!(g.abs() < 1e-5, "gradient {j}: {g}");
            for k in 0..2 {
                let f = |dj: f64, dk: f64| {
                    let mut v = b.clone();
                    v[j] += dj;
                    v[k] += dk;
                    loglik(&data, &v)
                };
                let num = (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h);
                let tol = 1e-3 * fit.hessian[j][k].abs().max(1.0);
                prop_assert!((num - fit.hessian[j][k]).abs() < tol, "H[{j}][{k}] {} vs {num}", fit.hessian[j][k]);
            }
        }
        // Closed form for a 2×2 table.
        let [a, bb, c, d] = counts.map(|x| x as f64);
        prop_assert!((fit.beta[1] - ((a * d) / (bb * c)).ln()).abs() < 1e-6);
    }
}
