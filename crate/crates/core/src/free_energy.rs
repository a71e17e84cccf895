//! Gaussian log-likelihood, the free-energy (ELBO) estimator and its
//! pathwise gradient.
//!
//! The expected log-likelihood is estimated from reparameterized samples
//! `θ* = m + S ε`; the KL term between the Gaussian posterior and prior is
//! exact. Mini-batch likelihoods are scaled by `N / |batch|`, so the estimate
//! is unbiased for the full-data free energy.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{kl_mvn, GaussianSpec, StandardNormalDraw, Structure};
use crate::models::ForwardModel;

/// One data series bound to its forward model.
#[derive(Clone, Debug)]
pub struct Problem {
    model: Arc<dyn ForwardModel>,
    data: Vec<f64>,
}

impl Problem {
    pub fn new(model: Arc<dyn ForwardModel>, data: Vec<f64>) -> Result<Self> {
        if data.len() != model.data_len() {
            return Err(Error::DimensionMismatch {
                expected: model.data_len(),
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation("data contains non-finite values".into()));
        }
        Ok(Self { model, data })
    }

    pub fn model(&self) -> &Arc<dyn ForwardModel> {
        &self.model
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Model parameters plus the noise coordinate.
    pub fn latent_dim(&self) -> usize {
        self.model.signature().parameter_count() + 1
    }

    pub fn full_batch(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElboEstimate {
    pub value: f64,
    pub likelihood_term: f64,
    pub kl_term: f64,
    pub sample_count: usize,
    pub batch: Vec<usize>,
}

/// Gradient of the free energy with respect to the posterior hyperparameters.
///
/// `d_factor` holds derivatives for the lower-triangular factor entries,
/// except on the diagonal where they are taken with respect to `ln S_ii`.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperGradient {
    pub d_mean: DVector<f64>,
    pub d_factor: DMatrix<f64>,
    pub structure: Structure,
}

impl HyperGradient {
    /// Flattened in the order of [`GaussianSpec::to_free`].
    pub fn to_free(&self) -> Vec<f64> {
        let p = self.d_mean.len();
        let mut out = Vec::with_capacity(GaussianSpec::free_len(p, self.structure));
        out.extend(self.d_mean.iter());
        out.extend((0..p).map(|i| self.d_factor[(i, i)]));
        if self.structure == Structure::Full {
            for i in 0..p {
                for j in 0..i {
                    out.push(self.d_factor[(i, j)]);
                }
            }
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.to_free().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `-(n/2) ln 2π - (n/2) λ - (e^{-λ}/2) Σ (y - g)²`.
pub fn log_likelihood(y: &[f64], predictions: &[f64], noise_log_neg_precision: f64) -> Result<f64> {
    if y.len() != predictions.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            found: predictions.len(),
        });
    }
    let sse: f64 = y.iter().zip(predictions).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(gaussian_log_likelihood(y.len(), sse, noise_log_neg_precision))
}

fn gaussian_log_likelihood(n: usize, sse: f64, lambda: f64) -> f64 {
    let n = n as f64;
    -0.5 * n * (2.0 * PI).ln() - 0.5 * n * lambda - 0.5 * (-lambda).exp() * sse
}

fn validate(problem: &Problem, q: &GaussianSpec, prior: &GaussianSpec, draws: &[StandardNormalDraw], batch: &[usize]) -> Result<()> {
    let p = problem.latent_dim();
    for dim in [q.dim(), prior.dim()] {
        if dim != p {
            return Err(Error::DimensionMismatch { expected: p, found: dim });
        }
    }
    if draws.is_empty() {
        return Err(Error::InvalidConfig("at least one posterior sample is required".into()));
    }
    if let Some(d) = draws.iter().find(|d| d.values.len() != p) {
        return Err(Error::DimensionMismatch { expected: p, found: d.values.len() });
    }
    if batch.is_empty() {
        return Err(Error::InvalidConfig("batch must not be empty".into()));
    }
    if let Some(&j) = batch.iter().find(|&&j| j >= problem.len()) {
        return Err(Error::InvalidConfig(format!("batch index {j} out of range")));
    }
    Ok(())
}

/// Reusable buffers for repeated likelihood evaluations on one problem.
pub(crate) struct Workspace {
    theta: Vec<f64>,
    pred: Vec<f64>,
    jac: Vec<f64>,
    grad_theta: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(problem: &Problem) -> Self {
        let p = problem.latent_dim();
        let n = problem.len();
        Self {
            theta: vec![0.0; p],
            pred: vec![0.0; n],
            jac: vec![0.0; n * (p - 1)],
            grad_theta: vec![0.0; p],
        }
    }
}

fn non_finite(problem: &Problem) -> Error {
    Error::NonFiniteOutput {
        model: problem.model.name().to_string(),
    }
}

/// Batch-scaled expected log-likelihood over the draws.
pub(crate) fn expected_log_likelihood(
    problem: &Problem,
    q: &GaussianSpec,
    draws: &[StandardNormalDraw],
    batch: &[usize],
    ws: &mut Workspace,
) -> Result<f64> {
    let p = problem.latent_dim();
    let nb = batch.len();
    let scale = problem.len() as f64 / nb as f64;
    let mut total = 0.0;
    for draw in draws {
        q.sample_into(&draw.values, &mut ws.theta);
        let pred = &mut ws.pred[..nb];
        problem.model.predict(&ws.theta[..p - 1], batch, pred);
        let sse: f64 = batch
            .iter()
            .zip(pred.iter())
            .map(|(&j, g)| {
                let r = problem.data[j] - g;
                r * r
            })
            .sum();
        total += scale * gaussian_log_likelihood(nb, sse, ws.theta[p - 1]);
    }
    let value = total / draws.len() as f64;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(non_finite(problem))
    }
}

/// Estimates the free energy `E_q[log p(y|θ)] - KL(q || prior)`.
pub fn estimate_elbo(
    problem: &Problem,
    q: &GaussianSpec,
    prior: &GaussianSpec,
    draws: &[StandardNormalDraw],
    batch: &[usize],
) -> Result<ElboEstimate> {
    validate(problem, q, prior, draws, batch)?;
    let mut ws = Workspace::new(problem);
    let likelihood_term = expected_log_likelihood(problem, q, draws, batch, &mut ws)?;
    let kl_term = kl_mvn(q, prior)?;
    Ok(ElboEstimate {
        value: likelihood_term - kl_term,
        likelihood_term,
        kl_term,
        sample_count: draws.len(),
        batch: batch.to_vec(),
    })
}

/// Pathwise gradient of [`estimate_elbo`] for the same draws and batch.
pub fn elbo_gradient(
    problem: &Problem,
    q: &GaussianSpec,
    prior: &GaussianSpec,
    draws: &[StandardNormalDraw],
    batch: &[usize],
) -> Result<HyperGradient> {
    validate(problem, q, prior, draws, batch)?;
    let mut ws = Workspace::new(problem);
    Ok(value_and_gradient(problem, q, prior, draws, batch, &mut ws)?.1)
}

/// `(likelihood term, gradient)` in a single pass over the draws.
pub(crate) fn value_and_gradient(
    problem: &Problem,
    q: &GaussianSpec,
    prior: &GaussianSpec,
    draws: &[StandardNormalDraw],
    batch: &[usize],
    ws: &mut Workspace,
) -> Result<(f64, HyperGradient)> {
    let p = problem.latent_dim();
    let np = p - 1;
    let nb = batch.len();
    let scale = problem.len() as f64 / nb as f64;
    let inv_l = 1.0 / draws.len() as f64;
    let structure = q.structure();

    let mut d_mean: DVector<f64> = DVector::zeros(p);
    let mut d_factor: DMatrix<f64> = DMatrix::zeros(p, p);
    let mut likelihood = 0.0;

    for draw in draws {
        let eps = &draw.values;
        q.sample_into(eps, &mut ws.theta);
        let lambda = ws.theta[np];
        let pred = &mut ws.pred[..nb];
        let jac = &mut ws.jac[..nb * np];
        problem.model.predict_with_jacobian(&ws.theta[..np], batch, pred, jac);

        let precision = (-lambda).exp();
        let g = &mut ws.grad_theta;
        g.iter_mut().for_each(|v| *v = 0.0);
        let mut sse = 0.0;
        for (row, (&j, pr)) in jac.chunks_exact(np).zip(batch.iter().zip(pred.iter())) {
            let r = problem.data[j] - pr;
            sse += r * r;
            for k in 0..np {
                g[k] += r * row[k];
            }
        }
        for gk in g[..np].iter_mut() {
            *gk *= scale * precision;
        }
        g[np] = scale * (-0.5 * nb as f64 + 0.5 * precision * sse);
        likelihood += scale * gaussian_log_likelihood(nb, sse, lambda);

        for i in 0..p {
            d_mean[i] += inv_l * g[i];
            match structure {
                Structure::Full => {
                    for jdx in 0..=i {
                        d_factor[(i, jdx)] += inv_l * g[i] * eps[jdx];
                    }
                }
                Structure::Diagonal => d_factor[(i, i)] += inv_l * g[i] * eps[i],
            }
        }
    }
    likelihood *= inv_l;

    // KL(q || prior) gradients: ∇m = C0⁻¹(m - m0), ∇S = C0⁻¹S - S⁻ᵀ.
    let sp = prior.factor();
    let solve = |rhs: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let half = sp
            .solve_lower_triangular(rhs)
            .ok_or(Error::NotPositiveDefinite { pivot: 0, value: 0.0 })?;
        sp.tr_solve_lower_triangular(&half)
            .ok_or(Error::NotPositiveDefinite { pivot: 0, value: 0.0 })
    };
    let diff = DMatrix::from_column_slice(p, 1, (q.mean() - prior.mean()).as_slice());
    let kl_mean = solve(&diff)?;
    let kl_factor = solve(q.factor())?;
    let s = q.factor();
    for i in 0..p {
        d_mean[i] -= kl_mean[(i, 0)];
        d_factor[(i, i)] -= kl_factor[(i, i)] - 1.0 / s[(i, i)];
        // log-diagonal chain rule
        d_factor[(i, i)] *= s[(i, i)];
        if structure == Structure::Full {
            for jdx in 0..i {
                d_factor[(i, jdx)] -= kl_factor[(i, jdx)];
            }
        }
    }

    if !likelihood.is_finite() || d_mean.iter().chain(d_factor.iter()).any(|v| !v.is_finite()) {
        return Err(non_finite(problem));
    }
    Ok((
        likelihood,
        HyperGradient {
            d_mean,
            d_factor,
            structure,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::DrawSource;
    use crate::models::{BiexpModel, DesignGrid, LinearModel};
    use crate::testutil::central_difference;

    fn linear_problem() -> Problem {
        let x = DMatrix::from_fn(20, 2, |j, k| if k == 0 { 1.0 } else { j as f64 / 10.0 });
        let model = Arc::new(LinearModel::new(x).unwrap());
        let y = (0..20).map(|j| 1.0 + 0.5 * j as f64 / 10.0 + 0.1 * ((j * 7 % 5) as f64 - 2.0)).collect();
        Problem::new(model, y).unwrap()
    }

    #[test]
    fn log_likelihood_examples() {
        let y = vec![0.5; 10];
        assert!((log_likelihood(&y, &y, 0.0).unwrap() - -9.189385332046726).abs() < 1e-12);
        let mut g = y.clone();
        g[0] -= 1.0;
        assert!((log_likelihood(&y, &g, 0.0).unwrap() - -9.689385332046726).abs() < 1e-12);
        assert!(log_likelihood(&y, &g[..3], 0.0).is_err());
    }

    #[test]
    fn log_likelihood_matches_density_product() {
        let src = DrawSource::new(5, 0);
        let y = src.draws(0, 1, 12)[0].values.clone();
        let g = src.draws(1, 1, 12)[0].values.clone();
        let lambda = 0.37;
        let sd = (lambda / 2.0f64).exp();
        let direct: f64 = y
            .iter()
            .zip(&g)
            .map(|(a, b)| {
                let z = (a - b) / sd;
                ((-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())).ln()
            })
            .sum();
        assert!((log_likelihood(&y, &g, lambda).unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn identical_prior_has_zero_kl() {
        let problem = linear_problem();
        let q = GaussianSpec::from_sds(DVector::from_vec(vec![1.0, 0.5, -1.0]), &[0.3, 0.2, 0.4], Structure::Full).unwrap();
        let draws = DrawSource::new(1, 0).draws(0, 5, 3);
        let est = estimate_elbo(&problem, &q, &q, &draws, &problem.full_batch()).unwrap();
        assert_eq!(est.kl_term, 0.0);
        assert_eq!(est.value, est.likelihood_term);
        let again = estimate_elbo(&problem, &q, &q, &draws, &problem.full_batch()).unwrap();
        assert_eq!(est.value.to_bits(), again.value.to_bits());
    }

    #[test]
    fn rejects_bad_inputs() {
        let problem = linear_problem();
        let q = GaussianSpec::standard(3, Structure::Full);
        let draws = DrawSource::new(1, 0).draws(0, 2, 3);
        assert!(estimate_elbo(&problem, &q, &q, &[], &[0]).is_err());
        assert!(estimate_elbo(&problem, &q, &q, &draws, &[]).is_err());
        assert!(estimate_elbo(&problem, &q, &q, &draws, &[20]).is_err());
        let q2 = GaussianSpec::standard(2, Structure::Full);
        assert!(estimate_elbo(&problem, &q2, &q, &draws, &[0]).is_err());
    }

    #[test]
    fn strided_batches_are_unbiased() {
        let problem = linear_problem();
        let q = GaussianSpec::from_sds(DVector::from_vec(vec![0.9, 0.4, 0.2]), &[0.1, 0.1, 0.3], Structure::Full).unwrap();
        let draws = DrawSource::new(2, 0).draws(0, 4, 3);
        let full = estimate_elbo(&problem, &q, &q, &draws, &problem.full_batch()).unwrap().likelihood_term;
        let batches = crate::optimizer::strided_batches(20, 5).unwrap();
        let mean: f64 = batches
            .iter()
            .map(|b| estimate_elbo(&problem, &q, &q, &draws, b).unwrap().likelihood_term)
            .sum::<f64>()
            / batches.len() as f64;
        assert!((mean - full).abs() < 1e-10 * full.abs());
    }

    #[test]
    fn no_signal_gives_zero_mean_gradient() {
        // A zero design matrix has a zero Jacobian.
        let model = Arc::new(LinearModel::new(DMatrix::zeros(8, 2)).unwrap());
        let problem = Problem::new(model, vec![0.0; 8]).unwrap();
        let q = GaussianSpec::from_sds(DVector::from_vec(vec![0.3, -0.2, 0.1]), &[0.5, 0.5, 0.5], Structure::Full).unwrap();
        let draws = DrawSource::new(3, 0).draws(0, 3, 3);
        let g = elbo_gradient(&problem, &q, &q, &draws, &problem.full_batch()).unwrap();
        assert_eq!(g.d_mean[0], 0.0);
        assert_eq!(g.d_mean[1], 0.0);
    }

    fn check_fd(problem: &Problem, q: &GaussianSpec, prior: &GaussianSpec, batch: &[usize]) {
        let p = q.dim();
        let structure = q.structure();
        let draws = DrawSource::new(9, 0).draws(0, 3, p);
        let grad = elbo_gradient(problem, q, prior, &draws, batch).unwrap().to_free();
        let free = q.to_free();
        let f = |x: &[f64]| {
            let qq = GaussianSpec::from_free(x, p, structure).unwrap();
            estimate_elbo(problem, &qq, prior, &draws, batch).unwrap().value
        };
        for k in 0..free.len() {
            let numeric = central_difference(f, &free, k, 1e-6);
            let tol = 1e-5 * numeric.abs().max(grad[k].abs()) + 1e-6;
            assert!((grad[k] - numeric).abs() < tol, "coord {k}: {} vs {numeric}", grad[k]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let problem = linear_problem();
        let prior = GaussianSpec::from_sds(DVector::from_vec(vec![0.0, 0.0, 0.0]), &[3.0, 2.0, 1.5], Structure::Full).unwrap();
        for structure in [Structure::Full, Structure::Diagonal] {
            let mut s = DMatrix::from_row_slice(3, 3, &[0.3, 0.0, 0.0, 0.05, 0.2, 0.0, -0.1, 0.02, 0.4]);
            if structure == Structure::Diagonal {
                s = DMatrix::from_diagonal(&s.diagonal());
            }
            let q = GaussianSpec::new(DVector::from_vec(vec![0.8, 0.6, 0.3]), s, structure).unwrap();
            check_fd(&problem, &q, &prior.to_structure(structure), &[1, 4, 9, 13]);
        }

        let grid = DesignGrid::linspace(0.0, 5.0, 30).unwrap();
        let model = Arc::new(BiexpModel::new(grid));
        let y: Vec<f64> = crate::models::model_evaluate(model.as_ref(), &[10.0, 1.0, 10.0, 10.0]).unwrap().iter().copied().collect();
        let problem = Problem::new(model, y).unwrap();
        let prior = GaussianSpec::from_sds(DVector::from_vec(vec![10.0, 1.0, 10.0, 10.0, 0.0]), &[2.0; 5], Structure::Full).unwrap();
        let q = GaussianSpec::from_sds(DVector::from_vec(vec![9.0, 1.2, 11.0, 8.0, 0.5]), &[0.3, 0.1, 0.5, 0.8, 0.2], Structure::Full).unwrap();
        check_fd(&problem, &q, &prior, &problem.full_batch());
    }

    #[test]
    fn diagonal_gradient_has_no_off_diagonal_terms() {
        let problem = linear_problem();
        let q = GaussianSpec::from_sds(DVector::from_vec(vec![1.0, 0.5, 0.0]), &[0.3, 0.2, 0.4], Structure::Diagonal).unwrap();
        let draws = DrawSource::new(1, 0).draws(0, 5, 3);
        let g = elbo_gradient(&problem, &q, &q, &draws, &problem.full_batch()).unwrap();
        for i in 0..3 {
            for j in 0..i {
                assert_eq!(g.d_factor[(i, j)], 0.0);
            }
        }
        assert_eq!(g.to_free().len(), 6);
    }
}
