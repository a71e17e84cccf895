use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use svb_core::gaussian::{DrawSource, StandardNormalDraw};
use svb_core::harness::{self, normalize_components, PosteriorScenario, PriorScenario, SimulationSpec};
use svb_core::models::{self, build_model, DesignGrid, LinearModel, ModelDesign};
use svb_core::oracles::{self, McmcOptions};
use svb_core::{
    elbo_gradient, estimate_elbo, fit, fit_many_with, sample_posterior, GaussianSpec, InitStrategy, OptimizerConfig,
    Problem, Structure,
};

fn lower(rows: &[&[f64]]) -> DMatrix<f64> {
    let p = rows.len();
    DMatrix::from_fn(p, p, |i, j| if j <= i { rows[i][j] } else { 0.0 })
}

#[test]
fn sample_covariance_matches_factor() {
    let s = lower(&[&[0.8], &[0.3, 0.5], &[-0.4, 0.2, 1.1]]);
    let q = GaussianSpec::new(DVector::from_vec(vec![1.0, -2.0, 0.5]), s.clone(), Structure::Full).unwrap();
    let target = &s * s.transpose();
    let n = 1_000_000;
    let draws = DrawSource::new(11, 0).draws(0, n, 3);
    let samples: Vec<DVector<f64>> = draws
        .iter()
        .map(|d| {
            let v = sample_posterior(&q, d).unwrap();
            v.model_params.clone().push(v.noise_log_neg_precision)
        })
        .collect();
    let mean = samples.iter().fold(DVector::zeros(3), |a, x| a + x) / n as f64;
    for i in 0..3 {
        for j in 0..=i {
            let prods: Vec<f64> = samples.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).collect();
            let c = prods.iter().sum::<f64>() / (n - 1) as f64;
            let var = prods.iter().map(|v| (v - c) * (v - c)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((c - target[(i, j)]).abs() < 4.0 * se, "({i},{j}): {c} vs {}", target[(i, j)]);
        }
    }
}

#[test]
fn estimate_spread_shrinks_as_inverse_root_sample_count() {
    let grid = DesignGrid::linspace(0.0, 5.0, 30).unwrap();
    let model = build_model(models::BIEXP, &ModelDesign::Times(grid)).unwrap();
    let y: Vec<f64> = models::model_evaluate(model.as_ref(), &[10.0, 1.0, 10.0, 10.0]).unwrap().iter().copied().collect();
    let problem = Problem::new(model, y).unwrap();
    let q = GaussianSpec::from_sds(DVector::from_vec(vec![9.0, 1.1, 11.0, 9.0, 0.0]), &[0.5, 0.05, 0.5, 0.5, 0.2], Structure::Full)
        .unwrap();
    let batch = problem.full_batch();
    let sd_for = |l: usize| {
        let values: Vec<f64> = (0..400u64)
            .map(|r| {
                let draws = DrawSource::new(12, l as u64).draws(r, l, 5);
                estimate_elbo(&problem, &q, &q, &draws, &batch).unwrap().value
            })
            .collect();
        let m = values.iter().sum::<f64>() / values.len() as f64;
        (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
    };
    let ls = [1usize, 10, 100];
    let xs: Vec<f64> = ls.iter().map(|&l| (l as f64).ln()).collect();
    let ys: Vec<f64> = ls.iter().map(|&l| sd_for(l).ln()).collect();
    let mx = xs.iter().sum::<f64>() / 3.0;
    let my = ys.iter().sum::<f64>() / 3.0;
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
    assert!((slope + 0.5).abs() <= 0.15, "log-log slope {slope}");
}

/// Draws whose model-parameter block has sample mean 0 and sample covariance
/// exactly I, so Monte-Carlo averages of linear and quadratic terms are exact.
fn whitened_draws(n: usize, dim: usize) -> Vec<StandardNormalDraw> {
    let raw = DrawSource::new(13, 0).draws(0, n, dim);
    let k = dim - 1;
    let mean = raw.iter().fold(DVector::zeros(k), |a, d| a + DVector::from_column_slice(&d.values[..k])) / n as f64;
    let mut cov = DMatrix::zeros(k, k);
    for d in &raw {
        let c = DVector::from_column_slice(&d.values[..k]) - &mean;
        cov += &c * c.transpose();
    }
    cov /= n as f64;
    let chol = cov.cholesky().unwrap().l();
    raw.iter()
        .map(|d| {
            let w = chol.solve_lower_triangular(&(DVector::from_column_slice(&d.values[..k]) - &mean)).unwrap();
            let mut values: Vec<f64> = w.iter().copied().collect();
            values.push(0.0);
            StandardNormalDraw::from_values(values)
        })
        .collect()
}

#[test]
fn linear_gradient_vanishes_at_conjugate_posterior() {
    let x = DMatrix::from_fn(25, 3, |j, k| ((j as f64 + 1.0) * (k as f64 + 1.0) * 0.37).sin());
    let y = DVector::from_fn(25, |j, _| 1.0 + (j as f64 * 0.9).cos());
    let lambda = -1.0f64;
    let theta_prior = GaussianSpec::from_sds(DVector::from_vec(vec![0.5, -0.5, 0.0]), &[2.0, 3.0, 1.0], Structure::Full).unwrap();
    let exact = oracles::linear_conjugate(&x, &y, (-lambda).exp(), &theta_prior).unwrap();

    let mut prior_mean = theta_prior.mean().clone().insert_row(3, lambda);
    prior_mean[3] = lambda;
    let prior = GaussianSpec::from_sds(prior_mean, &[2.0, 3.0, 1.0, 1e-6], Structure::Full).unwrap();
    let mut s = DMatrix::zeros(4, 4);
    s.view_mut((0, 0), (3, 3)).copy_from(exact.factor());
    s[(3, 3)] = 1e-12;
    let q = GaussianSpec::new(exact.mean().clone().insert_row(3, lambda), s, Structure::Full).unwrap();

    let model = Arc::new(LinearModel::new(x).unwrap());
    let problem = Problem::new(model, y.iter().copied().collect()).unwrap();
    let g = elbo_gradient(&problem, &q, &prior, &whitened_draws(200, 4), &problem.full_batch()).unwrap();
    let mut block = Vec::new();
    for i in 0..3 {
        block.push(g.d_mean[i]);
        for j in 0..=i {
            block.push(g.d_factor[(i, j)]);
        }
    }
    let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-6, "gradient norm {norm}");
}

#[test]
fn svb_matches_nlls_on_noiseless_data() {
    let spec = SimulationSpec {
        noise_sd: 1e-12,
        ..SimulationSpec::biexp(100, 1.0, 1, 0)
    };
    let set = harness::simulate(&spec).unwrap();
    let problem = &set.problems[0];
    let y = problem.data();
    let half = 0.5 * y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let point = oracles::nlls(set.model.as_ref(), y, &[half, 1.0, half, 10.0]).unwrap().params;

    let prior = PriorScenario::Noninformative.prior(&set).unwrap();
    let init = GaussianSpec::from_sds(DVector::from_vec(vec![half, 1.0, half, 10.0, 0.0]), &[0.3; 5], Structure::Full).unwrap();
    let config = OptimizerConfig {
        batch_size: Some(10),
        max_epochs: 1000,
        ..Default::default()
    };
    let r = fit(problem, &prior, &InitStrategy::Custom(init), &config).unwrap();
    let m = r.posterior.mean();
    let got = normalize_components([m[0], m[1], m[2], m[3]]);
    let want = normalize_components([point[0], point[1], point[2], point[3]]);
    for k in 0..4 {
        assert!((got[k] - want[k]).abs() <= 0.01 * want[k].abs(), "parameter {k}: {} vs {}", got[k], want[k]);
    }
}

#[test]
fn pipeline_is_invariant_to_component_labels() {
    let run = |truth: Vec<f64>| {
        let spec = SimulationSpec {
            truth,
            ..SimulationSpec::biexp(50, 1.0, 8, 21)
        };
        let set = harness::simulate(&spec).unwrap();
        let prior = PriorScenario::Noninformative.prior(&set).unwrap();
        let config = OptimizerConfig {
            batch_size: Some(10),
            max_epochs: 100,
            seed: 5,
            ..Default::default()
        };
        let init = |i| PosteriorScenario::Data.init(&set, &prior, i, 0.3).unwrap();
        let many = fit_many_with(&set.problems, &prior, init, &config);
        many.into_results()
            .unwrap()
            .iter()
            .map(|r| {
                let m = r.posterior.mean();
                normalize_components([m[0], m[1], m[2], m[3]])
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(vec![10.0, 1.0, 10.0, 10.0]), run(vec![10.0, 10.0, 10.0, 1.0]));
}

#[test]
fn mcmc_matches_linear_conjugate_posterior() {
    let x = DMatrix::from_fn(30, 3, |j, k| {
        let t = -1.0 + 2.0 * j as f64 / 29.0;
        t.powi(k as i32)
    });
    let noise = DrawSource::new(14, 0).draws(0, 1, 30)[0].values.clone();
    let y: Vec<f64> = (0..30).map(|j| 0.5 + 1.5 * x[(j, 1)] - 0.7 * x[(j, 2)] + 0.3 * noise[j]).collect();
    let lambda = (0.3f64 * 0.3).ln();
    let theta_prior = GaussianSpec::from_sds(DVector::zeros(3), &[5.0; 3], Structure::Full).unwrap();
    let exact = oracles::linear_conjugate(&x, &DVector::from_vec(y.clone()), (-lambda).exp(), &theta_prior).unwrap();

    let prior = GaussianSpec::from_sds(DVector::from_vec(vec![0.0, 0.0, 0.0, lambda]), &[5.0, 5.0, 5.0, 1e-3], Structure::Full)
        .unwrap();
    let problem = Problem::new(Arc::new(LinearModel::new(x).unwrap()), y).unwrap();
    let options = McmcOptions {
        start: Some(vec![0.5, 1.5, -0.7, lambda]),
        ..Default::default()
    };
    let chain = oracles::mcmc(&problem, &prior, 100_000, 3, &options).unwrap();
    let again = oracles::mcmc(&problem, &prior, 100_000, 3, &options).unwrap();
    assert_eq!(chain.samples, again.samples);
    let exact_cov = exact.covariance();
    for k in 0..3 {
        let err = (chain.mean[k] - exact.mean()[k]).abs();
        assert!(err < 3.0 * chain.std_error[k], "mean {k}: {} vs {}", chain.mean[k], exact.mean()[k]);
        let rel = (chain.covariance[(k, k)] / exact_cov[(k, k)] - 1.0).abs();
        assert!(rel < 0.1, "variance {k}: {} vs {}", chain.covariance[(k, k)], exact_cov[(k, k)]);
    }
}
