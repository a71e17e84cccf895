//! Independent reference solutions used to check the variational fits:
//! Levenberg–Marquardt least squares, random-walk Metropolis and the exact
//! conjugate posterior of the linear-Gaussian model.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::free_energy::{log_likelihood, Problem};
use crate::gaussian::{cholesky, DrawSource, GaussianSpec, Structure};
use crate::models::{model_evaluate, model_jacobian, ForwardModel};

pub const NLLS_MAX_ITERATIONS: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct NllsFit {
    pub params: Vec<f64>,
    pub residual_sum: f64,
    pub iterations: usize,
}

fn sse(model: &dyn ForwardModel, y: &[f64], params: &[f64]) -> f64 {
    match model_evaluate(model, params) {
        Ok(g) => y.iter().zip(g.iter()).map(|(a, b)| (a - b) * (a - b)).sum(),
        Err(_) => f64::INFINITY,
    }
}

/// Levenberg–Marquardt minimization of `Σ (y - g(θ))²` from `start`.
pub fn nlls(model: &dyn ForwardModel, y: &[f64], start: &[f64]) -> Result<NllsFit> {
    if y.len() != model.data_len() {
        return Err(Error::DimensionMismatch {
            expected: model.data_len(),
            found: y.len(),
        });
    }
    let p = start.len();
    let yv = DVector::from_column_slice(y);
    let mut theta = start.to_vec();
    let mut cost = sse(model, y, &theta);
    if !cost.is_finite() {
        return Err(Error::NonFiniteOutput {
            model: model.name().to_string(),
        });
    }
    let mut damping = 1e-3;
    for iteration in 0..NLLS_MAX_ITERATIONS {
        let j = model_jacobian(model, &theta)?;
        let r = &yv - model_evaluate(model, &theta)?;
        let jtj = j.transpose() * &j;
        let jtr = j.transpose() * &r;
        let grad_scale = jtr.amax();
        if grad_scale <= 1e-14 * (1.0 + cost) {
            return Ok(NllsFit {
                params: theta,
                residual_sum: cost,
                iterations: iteration,
            });
        }
        loop {
            let mut a = jtj.clone();
            for k in 0..p {
                a[(k, k)] += damping * jtj[(k, k)].max(1e-12);
            }
            let step = a.lu().solve(&jtr);
            let candidate: Vec<f64> = match &step {
                Some(s) => theta.iter().zip(s.iter()).map(|(t, d)| t + d).collect(),
                None => theta.clone(),
            };
            let new_cost = sse(model, y, &candidate);
            if step.is_some() && new_cost < cost {
                let step_norm = step.as_ref().map(|s| s.norm()).unwrap_or(0.0);
                let theta_norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
                let reduction = cost - new_cost;
                theta = candidate;
                cost = new_cost;
                damping = (damping / 3.0).max(1e-15);
                if step_norm <= 1e-13 * (theta_norm + 1e-13) || reduction <= 1e-15 * cost {
                    return Ok(NllsFit {
                        params: theta,
                        residual_sum: cost,
                        iterations: iteration + 1,
                    });
                }
                break;
            }
            damping *= 4.0;
            if damping > 1e16 {
                // No descent direction left at machine precision.
                return Ok(NllsFit {
                    params: theta,
                    residual_sum: cost,
                    iterations: iteration + 1,
                });
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: NLLS_MAX_ITERATIONS,
    })
}

#[derive(Clone, Debug)]
pub struct McmcOptions {
    pub burn_in: usize,
    /// Starting point; defaults to the prior mean.
    pub start: Option<Vec<f64>>,
    /// Initial proposal standard deviations; defaults to the prior's, capped
    /// at 0.1.
    pub proposal_sds: Option<Vec<f64>>,
    /// Number of batches used for batch-means standard errors.
    pub batches: usize,
}

impl Default for McmcOptions {
    fn default() -> Self {
        Self {
            burn_in: 20_000,
            start: None,
            proposal_sds: None,
            batches: 50,
        }
    }
}

#[derive(Clone, Debug)]
pub struct McmcSummary {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
    /// Batch-means Monte-Carlo standard error of each mean.
    pub std_error: Vec<f64>,
    pub effective_sample_size: Vec<f64>,
    pub acceptance_rate: f64,
    pub samples: Vec<Vec<f64>>,
}

fn log_target(problem: &Problem, prior_factor: &DMatrix<f64>, prior_mean: &DVector<f64>, x: &[f64]) -> f64 {
    let p = x.len();
    let diff = DVector::from_column_slice(x) - prior_mean;
    let log_prior = match prior_factor.solve_lower_triangular(&diff) {
        Some(z) => -0.5 * z.norm_squared(),
        None => return f64::NEG_INFINITY,
    };
    let Ok(pred) = model_evaluate(problem.model().as_ref(), &x[..p - 1]) else {
        return f64::NEG_INFINITY;
    };
    match log_likelihood(problem.data(), pred.as_slice(), x[p - 1]) {
        Ok(ll) if ll.is_finite() => ll + log_prior,
        _ => f64::NEG_INFINITY,
    }
}

/// Random-walk Metropolis over the full latent vector targeting
/// prior × likelihood.
///
/// During burn-in the proposal covariance is re-estimated from the chain
/// every 1000 steps (scaled by 2.38²/d) and a global scale is nudged toward
/// a 0.25 acceptance rate. After burn-in the proposal is frozen.
pub fn mcmc(problem: &Problem, prior: &GaussianSpec, n_samples: usize, seed: u64, options: &McmcOptions) -> Result<McmcSummary> {
    let p = problem.latent_dim();
    if prior.dim() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: prior.dim(),
        });
    }
    if n_samples < options.batches.max(2) {
        return Err(Error::InvalidConfig("too few MCMC samples".into()));
    }
    let mut rng = DrawSource::new(seed, 0x6d636d63).rng(0);
    let prior_mean = prior.mean().clone();
    let prior_factor = prior.factor().clone();

    let mut x = options
        .start
        .clone()
        .unwrap_or_else(|| prior_mean.iter().copied().collect());
    let sds = options
        .proposal_sds
        .clone()
        .unwrap_or_else(|| prior.sds().iter().map(|s| s.min(0.1)).collect());
    let mut proposal = DMatrix::from_diagonal(&DVector::from_vec(sds));
    let mut scale = 1.0;
    let mut log_p = log_target(problem, &prior_factor, &prior_mean, &x);
    if !log_p.is_finite() {
        return Err(Error::InvalidConfig("MCMC start point has zero density".into()));
    }

    let mut history: Vec<Vec<f64>> = Vec::with_capacity(options.burn_in);
    let mut window_accepts = 0usize;
    let mut samples = Vec::with_capacity(n_samples);
    let mut accepted = 0usize;
    let mut eps = vec![0.0; p];
    let mut candidate = vec![0.0; p];

    for step in 0..(options.burn_in + n_samples) {
        for e in eps.iter_mut() {
            *e = StandardNormal.sample(&mut rng);
        }
        for i in 0..p {
            let mut v = x[i];
            for j in 0..=i {
                v += scale * proposal[(i, j)] * eps[j];
            }
            candidate[i] = v;
        }
        let log_c = log_target(problem, &prior_factor, &prior_mean, &candidate);
        let u: f64 = rng.random();
        let accept = log_c.is_finite() && u.ln() < log_c - log_p;
        if accept {
            x.copy_from_slice(&candidate);
            log_p = log_c;
        }
        if step < options.burn_in {
            history.push(x.clone());
            window_accepts += accept as usize;
            if (step + 1) % 1000 == 0 {
                let rate = window_accepts as f64 / 1000.0;
                scale *= ((rate - 0.25) * 2.0).exp();
                window_accepts = 0;
                let tail = &history[history.len() / 2..];
                if tail.len() > 10 * p {
                    let cov = sample_covariance(tail);
                    let regularized = cov * (2.38 * 2.38 / p as f64)
                        + DMatrix::identity(p, p) * 1e-12;
                    if let Ok(f) = cholesky(&regularized) {
                        proposal = f;
                    }
                }
            }
        } else {
            accepted += accept as usize;
            samples.push(x.clone());
        }
    }

    let covariance = sample_covariance(&samples);
    let mean: Vec<f64> = (0..p)
        .map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / n_samples as f64)
        .collect();
    let batch_len = n_samples / options.batches;
    let mut std_error = Vec::with_capacity(p);
    let mut ess = Vec::with_capacity(p);
    for i in 0..p {
        let means: Vec<f64> = (0..options.batches)
            .map(|b| samples[b * batch_len..(b + 1) * batch_len].iter().map(|s| s[i]).sum::<f64>() / batch_len as f64)
            .collect();
        let grand = means.iter().sum::<f64>() / means.len() as f64;
        let var_means = means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>() / (means.len() - 1) as f64;
        let se = (var_means / means.len() as f64).sqrt();
        std_error.push(se);
        ess.push(if se > 0.0 { covariance[(i, i)] / (se * se) } else { n_samples as f64 });
    }
    Ok(McmcSummary {
        mean,
        covariance,
        std_error,
        effective_sample_size: ess,
        acceptance_rate: accepted as f64 / n_samples as f64,
        samples,
    })
}

fn sample_covariance(samples: &[Vec<f64>]) -> DMatrix<f64> {
    let p = samples[0].len();
    let n = samples.len() as f64;
    let mean: Vec<f64> = (0..p).map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / n).collect();
    let mut cov = DMatrix::zeros(p, p);
    for s in samples {
        for i in 0..p {
            let di = s[i] - mean[i];
            for j in 0..=i {
                cov[(i, j)] += di * (s[j] - mean[j]);
            }
        }
    }
    for i in 0..p {
        for j in 0..=i {
            cov[(i, j)] /= n - 1.0;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    cov
}

/// Exact posterior of `θ` for `y = Xθ + e`, `e ~ N(0, I/φ)` and a Gaussian
/// prior on `θ`.
pub fn linear_conjugate(x: &DMatrix<f64>, y: &DVector<f64>, precision: f64, prior: &GaussianSpec) -> Result<GaussianSpec> {
    let p = x.ncols();
    if prior.dim() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: prior.dim(),
        });
    }
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            found: y.len(),
        });
    }
    if !(precision > 0.0) {
        return Err(Error::InvalidConfig("noise precision must be positive".into()));
    }
    let prior_cov = prior.covariance();
    let prior_precision = prior_cov
        .clone()
        .try_inverse()
        .ok_or(Error::NotPositiveDefinite { pivot: 0, value: 0.0 })?;
    let post_precision = &prior_precision + x.transpose() * x * precision;
    let post_precision = (&post_precision + post_precision.transpose()) * 0.5;
    let post_cov = post_precision
        .try_inverse()
        .ok_or(Error::NotPositiveDefinite { pivot: 0, value: 0.0 })?;
    let post_cov = (&post_cov + post_cov.transpose()) * 0.5;
    let mean = &post_cov * (&prior_precision * prior.mean() + x.transpose() * y * precision);
    GaussianSpec::from_covariance(mean, &post_cov, Structure::Full)
}
