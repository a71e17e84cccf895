//! Adam-driven stochastic ascent of the free energy.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::free_energy::{expected_log_likelihood, value_and_gradient, Problem, Workspace};
use crate::gaussian::{cholesky, kl_mvn, DrawSource, GaussianSpec, StandardNormalDraw, Structure};

/// Minimum size of the fixed draw-set used to evaluate the per-epoch trace.
pub const MIN_EVALUATION_DRAWS: usize = 50;

/// Counter reserved for the trace evaluation draws of every stream.
const EVALUATION_COUNTER: u64 = u64::MAX;

/// Unspecified fields take their defaults when deserializing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub sample_count: usize,
    /// `None` means the whole series in every iteration.
    pub batch_size: Option<usize>,
    pub max_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub convergence_tolerance_fraction: f64,
    pub structure: Structure,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            sample_count: 20,
            batch_size: None,
            max_epochs: 500,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            convergence_tolerance_fraction: 0.01,
            structure: Structure::Full,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.sample_count == 0 {
            return bad("sample_count must be at least 1");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam decay rates must lie in [0, 1)");
        }
        if !(self.adam_epsilon >= 0.0) {
            return bad("adam_epsilon must be non-negative");
        }
        if !(self.convergence_tolerance_fraction >= 0.0) {
            return bad("convergence_tolerance_fraction must be non-negative");
        }
        Ok(())
    }

    fn batch_size_for(&self, n: usize) -> Result<usize> {
        let b = self.batch_size.unwrap_or(n);
        if b == 0 || b > n {
            return Err(Error::InvalidBatchSize { batch: b, n });
        }
        Ok(b)
    }
}

/// Splits `0..n` into `ceil(n/b)` interleaved batches `{k, k+K, k+2K, ...}`,
/// so every batch spans the whole series.
pub fn strided_batches(n: usize, b: usize) -> Result<Vec<Vec<usize>>> {
    if b == 0 || b > n {
        return Err(Error::InvalidBatchSize { batch: b, n });
    }
    let k = n.div_ceil(b);
    Ok((0..k).map(|start| (start..n).step_by(k).collect()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&OptimizerConfig> for AdamParams {
    fn from(c: &OptimizerConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            epsilon: c.adam_epsilon,
        }
    }
}

/// First and second moment estimates of Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            first: vec![0.0; dim],
            second: vec![0.0; dim],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Bias-corrected Adam step. Returns the delta to *add* to the
    /// parameters: the update ascends along `gradient`.
    pub fn step(&mut self, gradient: &[f64], params: &AdamParams) -> Result<Vec<f64>> {
        if gradient.len() != self.first.len() {
            return Err(Error::DimensionMismatch {
                expected: self.first.len(),
                found: gradient.len(),
            });
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - params.beta1.powi(t);
        let c2 = 1.0 - params.beta2.powi(t);
        Ok(gradient
            .iter()
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
            .map(|(&g, (m, v))| {
                *m = params.beta1 * *m + (1.0 - params.beta1) * g;
                *v = params.beta2 * *v + (1.0 - params.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                params.learning_rate * m_hat / (v_hat.sqrt() + params.epsilon)
            })
            .collect())
    }
}

/// Pure form of [`AdamState::step`].
pub fn adam_step(state: &AdamState, gradient: &[f64], params: &AdamParams) -> Result<(AdamState, Vec<f64>)> {
    let mut next = state.clone();
    let delta = next.step(gradient, params)?;
    Ok((next, delta))
}

/// How the posterior is initialised.
#[derive(Clone, Debug, PartialEq)]
pub enum InitStrategy {
    /// Start from the prior.
    PriorMatched,
    /// Ask the model for starting values from the data series. The noise
    /// coordinate starts at `ln(sample variance)` with standard deviation 1.
    DataDriven,
    Custom(GaussianSpec),
}

impl InitStrategy {
    pub fn resolve(&self, problem: &Problem, prior: &GaussianSpec, structure: Structure) -> Result<GaussianSpec> {
        let p = problem.latent_dim();
        if prior.dim() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: prior.dim(),
            });
        }
        let q = match self {
            InitStrategy::PriorMatched => prior.clone(),
            InitStrategy::DataDriven => {
                let y = problem.data();
                let prior_mean: Vec<f64> = prior.mean().iter().copied().collect();
                let prior_sds = prior.sds();
                let (mut mean, mut sds) =
                    problem
                        .model()
                        .data_driven_init(y, &prior_mean[..p - 1], &prior_sds[..p - 1]);
                let variance = sample_variance(y);
                mean.push(if variance > 0.0 {
                    variance.ln()
                } else {
                    prior_mean[p - 1]
                });
                sds.push(1.0);
                GaussianSpec::from_sds(DVector::from_vec(mean), &sds, structure)?
            }
            InitStrategy::Custom(q) => {
                if q.dim() != p {
                    return Err(Error::DimensionMismatch {
                        expected: p,
                        found: q.dim(),
                    });
                }
                q.clone()
            }
        };
        Ok(q.to_structure(structure))
    }
}

pub(crate) fn sample_variance(y: &[f64]) -> f64 {
    if y.len() < 2 {
        return 0.0;
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitResult {
    /// Posterior at the epoch with the best trace free energy.
    pub posterior: GaussianSpec,
    pub free_energy_trace: Vec<f64>,
    /// Cumulative wall time at the end of each epoch, including the trace
    /// evaluation.
    pub elapsed_s: Vec<f64>,
    /// Cumulative time spent in optimizer iterations only.
    pub optimizer_elapsed_s: Vec<f64>,
    pub best_free_energy: Option<f64>,
    pub best_epoch: Option<usize>,
    pub convergence_epoch: Option<usize>,
    pub wall_time_to_convergence: Option<f64>,
    pub optimizer_time_to_convergence: Option<f64>,
    pub epochs_run: usize,
    pub iterations: u64,
}

/// First epoch within `tolerance_fraction · |best|` of the best value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Convergence {
    pub epoch: usize,
    pub wall_time: f64,
}

pub fn convergence_time(free_energy: &[f64], wall_times: &[f64], tolerance_fraction: f64) -> Result<Convergence> {
    if free_energy.is_empty() {
        return Err(Error::EmptyTrace);
    }
    if wall_times.len() != free_energy.len() {
        return Err(Error::DimensionMismatch {
            expected: free_energy.len(),
            found: wall_times.len(),
        });
    }
    let best = free_energy
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if best == f64::NEG_INFINITY {
        return Err(Error::EmptyTrace);
    }
    let threshold = best - tolerance_fraction * best.abs();
    let epoch = free_energy
        .iter()
        .position(|&f| f >= threshold)
        .expect("best is in the trace");
    Ok(Convergence {
        epoch,
        wall_time: wall_times[epoch],
    })
}

/// Fixed evaluation draws, centred and whitened so their sample mean is
/// zero and sample covariance the identity.
fn evaluation_draws(source: &DrawSource, count: usize, dim: usize) -> Vec<StandardNormalDraw> {
    let mut draws = source.draws(EVALUATION_COUNTER, count, dim);
    if count <= dim {
        return draws;
    }
    let m = count as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|i| draws.iter().map(|d| d.values[i]).sum::<f64>() / m)
        .collect();
    let mut cov = DMatrix::zeros(dim, dim);
    for d in &draws {
        for i in 0..dim {
            for j in 0..dim {
                cov[(i, j)] += (d.values[i] - mean[i]) * (d.values[j] - mean[j]) / m;
            }
        }
    }
    let Ok(w) = cholesky(&cov) else {
        return draws;
    };
    for d in draws.iter_mut() {
        let centred = DVector::from_iterator(dim, (0..dim).map(|i| d.values[i] - mean[i]));
        if let Some(z) = w.solve_lower_triangular(&centred) {
            d.values = z.iter().copied().collect();
        }
    }
    draws
}

/// Fits one problem using draw stream 0.
pub fn fit(problem: &Problem, prior: &GaussianSpec, init: &InitStrategy, config: &OptimizerConfig) -> Result<FitResult> {
    fit_stream(problem, prior, init, config, 0, 1.0)
}

/// Runs the optimizer on one problem.
///
/// `stream` selects the independent draw stream; `gradient_scale` multiplies
/// every gradient (`1/M` when the problem is one of `M` in a joint loss).
pub fn fit_stream(
    problem: &Problem,
    prior: &GaussianSpec,
    init: &InitStrategy,
    config: &OptimizerConfig,
    stream: u64,
    gradient_scale: f64,
) -> Result<FitResult> {
    config.validate()?;
    let n = problem.len();
    let p = problem.latent_dim();
    let structure = config.structure;
    let batches = strided_batches(n, config.batch_size_for(n)?)?;
    let initial = init.resolve(problem, prior, structure)?;
    let full = problem.full_batch();
    let adam = AdamParams::from(config);
    let source = DrawSource::new(config.seed, stream);
    let eval_draws = evaluation_draws(&source, config.sample_count.max(MIN_EVALUATION_DRAWS), p);
    let mut ws = Workspace::new(problem);

    let mut free = initial.to_free();
    let mut state = AdamState::new(free.len());
    let mut best_free: Option<Vec<f64>> = None;
    let mut best_value = f64::NEG_INFINITY;
    let mut trace = Vec::with_capacity(config.max_epochs);
    let mut elapsed = Vec::with_capacity(config.max_epochs);
    let mut optimizer_elapsed = Vec::with_capacity(config.max_epochs);
    let mut optimizer_time = Duration::ZERO;
    let mut counter = 0u64;
    let start = Instant::now();

    let snapshot = |trace: &[f64], elapsed: &[f64], optimizer_elapsed: &[f64], best: &Option<Vec<f64>>, iterations: u64| {
        finish(
            &initial,
            best.as_deref(),
            p,
            structure,
            trace,
            elapsed,
            optimizer_elapsed,
            config.convergence_tolerance_fraction,
            iterations,
        )
    };

    for epoch in 0..config.max_epochs {
        let epoch_start = Instant::now();
        let step_result: Result<()> = (|| {
            for batch in &batches {
                let q = GaussianSpec::from_free(&free, p, structure)?;
                let draws = source.draws(counter, config.sample_count, p);
                counter += 1;
                let (_, grad) = value_and_gradient(problem, &q, prior, &draws, batch, &mut ws)?;
                let mut g = grad.to_free();
                if gradient_scale != 1.0 {
                    g.iter_mut().for_each(|v| *v *= gradient_scale);
                }
                let delta = state.step(&g, &adam)?;
                for (x, d) in free.iter_mut().zip(delta) {
                    *x += d;
                }
            }
            Ok(())
        })();
        optimizer_time += epoch_start.elapsed();

        let value = step_result.and_then(|_| {
            let q = GaussianSpec::from_free(&free, p, structure)?;
            let f = expected_log_likelihood(problem, &q, &eval_draws, &full, &mut ws)? - kl_mvn(&q, prior)?;
            if f.is_finite() {
                Ok(f)
            } else {
                Err(Error::NonFiniteOutput {
                    model: problem.model().name().to_string(),
                })
            }
        });
        match value {
            Ok(f) => {
                if f > best_value {
                    best_value = f;
                    best_free = Some(free.clone());
                }
                trace.push(f);
                elapsed.push(start.elapsed().as_secs_f64());
                optimizer_elapsed.push(optimizer_time.as_secs_f64());
            }
            Err(e) => {
                let partial = snapshot(&trace, &elapsed, &optimizer_elapsed, &best_free, counter)?;
                return Err(Error::ModelEvaluationFailure {
                    epoch,
                    reason: e.to_string(),
                    partial: Box::new(partial),
                });
            }
        }
    }
    snapshot(&trace, &elapsed, &optimizer_elapsed, &best_free, counter)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    initial: &GaussianSpec,
    best_free: Option<&[f64]>,
    p: usize,
    structure: Structure,
    trace: &[f64],
    elapsed: &[f64],
    optimizer_elapsed: &[f64],
    tolerance: f64,
    iterations: u64,
) -> Result<FitResult> {
    let posterior = match best_free {
        Some(free) => GaussianSpec::from_free(free, p, structure)?,
        None => initial.clone(),
    };
    let best_epoch = trace
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, &f)| match acc {
            Some((_, b)) if b >= f => acc,
            _ => Some((i, f)),
        });
    let convergence = convergence_time(trace, elapsed, tolerance).ok();
    Ok(FitResult {
        posterior,
        free_energy_trace: trace.to_vec(),
        elapsed_s: elapsed.to_vec(),
        optimizer_elapsed_s: optimizer_elapsed.to_vec(),
        best_free_energy: best_epoch.map(|(_, f)| f),
        best_epoch: best_epoch.map(|(i, _)| i),
        convergence_epoch: convergence.map(|c| c.epoch),
        wall_time_to_convergence: convergence.map(|c| c.wall_time),
        optimizer_time_to_convergence: convergence.map(|c| optimizer_elapsed[c.epoch]),
        epochs_run: trace.len(),
        iterations,
    })
}

/// Outcome of a joint fit over many independent problems.
#[derive(Debug)]
pub struct ManyFit {
    pub outcomes: Vec<Result<FitResult>>,
    /// Per-epoch mean free energy over the problems that completed.
    pub joint_trace: Vec<f64>,
}

impl ManyFit {
    pub fn into_results(self) -> Result<Vec<FitResult>> {
        self.outcomes.into_iter().collect()
    }

    pub fn failures(&self) -> usize {
        self.outcomes.iter().filter(|o| o.is_err()).count()
    }
}

/// Optimizes the mean free energy over `problems`.
///
/// Each problem keeps its own hyperparameters, Adam moments and draw stream
/// (stream `i` for problem `i`), so the gradient of the mean loss with
/// respect to problem `i` is its own gradient scaled by `1/M`. Adam is
/// invariant to that scale except through `adam_epsilon`, so trajectories
/// match independent fits to within terms of order `M·ε/√v`.
pub fn fit_many(problems: &[Problem], prior: &GaussianSpec, init: &InitStrategy, config: &OptimizerConfig) -> ManyFit {
    fit_many_with(problems, prior, |_| init.clone(), config)
}

/// [`fit_many`] with a separate initial posterior per problem.
pub fn fit_many_with<F>(problems: &[Problem], prior: &GaussianSpec, init_for: F, config: &OptimizerConfig) -> ManyFit
where
    F: Fn(usize) -> InitStrategy + Sync,
{
    let scale = 1.0 / problems.len().max(1) as f64;
    let outcomes: Vec<Result<FitResult>> = problems
        .par_iter()
        .enumerate()
        .map(|(i, problem)| fit_stream(problem, prior, &init_for(i), config, i as u64, scale))
        .collect();
    let done: Vec<&FitResult> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let joint_trace = if done.is_empty() {
        Vec::new()
    } else {
        (0..config.max_epochs)
            .map(|e| done.iter().map(|r| r.free_energy_trace[e]).sum::<f64>() / done.len() as f64)
            .collect()
    };
    ManyFit {
        outcomes,
        joint_trace,
    }
}
