//! Dense multivariate Gaussians parameterized by a lower-triangular Cholesky
//! factor, reparameterized sampling and the closed-form KL divergence.
//!
//! The latent vector of every problem is the model parameters followed by a
//! single noise coordinate `lambda = -ln(precision)`, so a Gaussian over the
//! latent vector keeps the noise precision positive without any clamping.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// Covariance structure of a [`GaussianSpec`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    #[default]
    Full,
    Diagonal,
}

impl std::fmt::Display for Structure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Structure::Full => f.write_str("full"),
            Structure::Diagonal => f.write_str("diagonal"),
        }
    }
}

impl std::str::FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Structure::Full),
            "diagonal" => Ok(Structure::Diagonal),
            other => Err(Error::InvalidConfig(format!(
                "unknown covariance structure `{other}`"
            ))),
        }
    }
}

/// A multivariate normal `N(mean, S Sᵀ)` stored through its Cholesky factor `S`.
///
/// The factor is always lower-triangular with a strictly positive diagonal,
/// and under [`Structure::Diagonal`] every off-diagonal entry is exactly zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianRepr", into = "GaussianRepr")]
pub struct GaussianSpec {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
    structure: Structure,
}

#[derive(Serialize, Deserialize)]
struct GaussianRepr {
    mean: Vec<f64>,
    factor_rows: Vec<Vec<f64>>,
    structure: Structure,
}

impl TryFrom<GaussianRepr> for GaussianSpec {
    type Error = Error;

    fn try_from(repr: GaussianRepr) -> Result<Self> {
        let p = repr.mean.len();
        if repr.factor_rows.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: repr.factor_rows.len(),
            });
        }
        let mut factor = DMatrix::zeros(p, p);
        for (i, row) in repr.factor_rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    found: row.len(),
                });
            }
            for (j, v) in row.iter().enumerate() {
                factor[(i, j)] = *v;
            }
        }
        GaussianSpec::new(DVector::from_vec(repr.mean), factor, repr.structure)
    }
}

impl From<GaussianSpec> for GaussianRepr {
    fn from(g: GaussianSpec) -> Self {
        let p = g.dim();
        GaussianRepr {
            mean: g.mean.iter().copied().collect(),
            factor_rows: (0..p)
                .map(|i| (0..p).map(|j| g.factor[(i, j)]).collect())
                .collect(),
            structure: g.structure,
        }
    }
}

impl GaussianSpec {
    pub fn new(mean: DVector<f64>, factor: DMatrix<f64>, structure: Structure) -> Result<Self> {
        let p = mean.len();
        if factor.nrows() != p || factor.ncols() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: factor.nrows().max(factor.ncols()),
            });
        }
        if mean.iter().chain(factor.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "Gaussian mean and factor must be finite".into(),
            ));
        }
        for i in 0..p {
            let d = factor[(i, i)];
            if d <= 0.0 {
                return Err(Error::NotPositiveDefinite { pivot: i, value: d });
            }
            for j in (i + 1)..p {
                if factor[(i, j)] != 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "factor must be lower-triangular, entry ({i}, {j}) is nonzero"
                    )));
                }
            }
            if structure == Structure::Diagonal {
                for j in 0..i {
                    if factor[(i, j)] != 0.0 {
                        return Err(Error::InvalidConfig(format!(
                            "diagonal structure requires zero off-diagonal factor, entry ({i}, {j}) is nonzero"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            mean,
            factor,
            structure,
        })
    }

    /// Independent coordinates with the given standard deviations.
    pub fn from_sds(mean: DVector<f64>, sds: &[f64], structure: Structure) -> Result<Self> {
        if sds.len() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                found: sds.len(),
            });
        }
        let factor = DMatrix::from_diagonal(&DVector::from_column_slice(sds));
        Self::new(mean, factor, structure)
    }

    /// Builds from a covariance matrix. Under [`Structure::Diagonal`] only the
    /// variances are kept.
    pub fn from_covariance(
        mean: DVector<f64>,
        covariance: &DMatrix<f64>,
        structure: Structure,
    ) -> Result<Self> {
        match structure {
            Structure::Full => {
                let factor = cholesky(covariance)?;
                Self::new(mean, factor, structure)
            }
            Structure::Diagonal => {
                let sds: Vec<f64> = covariance.diagonal().iter().map(|v| v.sqrt()).collect();
                Self::from_sds(mean, &sds, structure)
            }
        }
    }

    pub fn standard(dim: usize, structure: Structure) -> Self {
        Self {
            mean: DVector::zeros(dim),
            factor: DMatrix::identity(dim, dim),
            structure,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }

    /// Marginal standard deviations (row norms of the factor).
    pub fn sds(&self) -> Vec<f64> {
        self.factor.row_iter().map(|r| r.norm()).collect()
    }

    pub fn log_det_covariance(&self) -> f64 {
        2.0 * self.factor.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Same mean, covariance reduced to its diagonal.
    pub fn to_structure(&self, structure: Structure) -> Self {
        match structure {
            Structure::Full => Self {
                structure,
                ..self.clone()
            },
            Structure::Diagonal => {
                let sds = self.sds();
                Self {
                    mean: self.mean.clone(),
                    factor: DMatrix::from_diagonal(&DVector::from_vec(sds)),
                    structure,
                }
            }
        }
    }

    pub fn with_mean(&self, mean: DVector<f64>) -> Result<Self> {
        if mean.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: mean.len(),
            });
        }
        Ok(Self {
            mean,
            ..self.clone()
        })
    }

    /// Number of free hyperparameters for a `dim`-dimensional Gaussian.
    pub fn free_len(dim: usize, structure: Structure) -> usize {
        match structure {
            Structure::Full => 2 * dim + dim * (dim - 1) / 2,
            Structure::Diagonal => 2 * dim,
        }
    }

    /// Flattens into the coordinates the optimizer works in: the mean, then
    /// the log of the factor diagonal, then (full structure only) the strictly
    /// lower entries in row-major order.
    pub fn to_free(&self) -> Vec<f64> {
        let p = self.dim();
        let mut out = Vec::with_capacity(Self::free_len(p, self.structure));
        out.extend(self.mean.iter());
        out.extend((0..p).map(|i| self.factor[(i, i)].ln()));
        if self.structure == Structure::Full {
            for i in 0..p {
                for j in 0..i {
                    out.push(self.factor[(i, j)]);
                }
            }
        }
        out
    }

    /// Inverse of [`GaussianSpec::to_free`]. Any finite input gives a valid
    /// Gaussian, since the diagonal goes through `exp`.
    pub fn from_free(free: &[f64], dim: usize, structure: Structure) -> Result<Self> {
        let expected = Self::free_len(dim, structure);
        if free.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: free.len(),
            });
        }
        let mean = DVector::from_column_slice(&free[..dim]);
        let mut factor = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            factor[(i, i)] = free[dim + i].exp();
        }
        if structure == Structure::Full {
            let mut k = 2 * dim;
            for i in 0..dim {
                for j in 0..i {
                    factor[(i, j)] = free[k];
                    k += 1;
                }
            }
        }
        Self::new(mean, factor, structure)
    }

    /// `out = mean + S * eps`, without allocating.
    pub(crate) fn sample_into(&self, eps: &[f64], out: &mut [f64]) {
        let p = self.dim();
        for i in 0..p {
            let mut acc = self.mean[i];
            for j in 0..=i {
                acc += self.factor[(i, j)] * eps[j];
            }
            out[i] = acc;
        }
    }
}

/// A point in latent space: model parameters plus `lambda = -ln(precision)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector {
    pub model_params: DVector<f64>,
    pub noise_log_neg_precision: f64,
}

impl LatentVector {
    /// Splits a full latent vector; the last coordinate is the noise parameter.
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let (noise, params) = values.split_last().ok_or(Error::DimensionMismatch {
            expected: 1,
            found: 0,
        })?;
        Ok(Self {
            model_params: DVector::from_column_slice(params),
            noise_log_neg_precision: *noise,
        })
    }

    pub fn noise_precision(&self) -> f64 {
        (-self.noise_log_neg_precision).exp()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.model_params.iter().copied().collect();
        v.push(self.noise_log_neg_precision);
        v
    }
}

/// Where a draw came from, enough to regenerate it bit-for-bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DrawProvenance {
    pub seed: u64,
    pub stream: u64,
    pub counter: u64,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StandardNormalDraw {
    pub values: Vec<f64>,
    pub provenance: DrawProvenance,
}

impl StandardNormalDraw {
    /// Wraps explicit values (tests, quadrature), with zeroed provenance.
    pub fn from_values(values: Vec<f64>) -> Self {
        Self {
            values,
            provenance: DrawProvenance {
                seed: 0,
                stream: 0,
                counter: 0,
                index: 0,
            },
        }
    }

    pub fn regenerate(provenance: DrawProvenance, dim: usize) -> Self {
        let source = DrawSource::new(provenance.seed, provenance.stream);
        source
            .draws(provenance.counter, provenance.index + 1, dim)
            .pop()
            .expect("at least one draw")
    }
}

/// Deterministic supplier of standard-normal draws.
///
/// Each `(seed, stream, counter)` triple keys an independent ChaCha8 stream,
/// so the draws for any iteration can be reproduced without replaying the
/// ones before it.
#[derive(Clone, Copy, Debug)]
pub struct DrawSource {
    seed: u64,
    stream: u64,
}

impl DrawSource {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn rng(&self, counter: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.stream.to_le_bytes());
        key[16..24].copy_from_slice(&counter.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }

    pub fn draws(&self, counter: u64, count: usize, dim: usize) -> Vec<StandardNormalDraw> {
        let mut rng = self.rng(counter);
        (0..count)
            .map(|index| StandardNormalDraw {
                values: (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect(),
                provenance: DrawProvenance {
                    seed: self.seed,
                    stream: self.stream,
                    counter,
                    index,
                },
            })
            .collect()
    }
}

/// Lower-triangular `S` with `S Sᵀ = c`.
pub fn cholesky(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = c.nrows();
    if c.ncols() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: c.ncols(),
        });
    }
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..p {
        for j in 0..i {
            if (c[(i, j)] - c[(j, i)]).abs() > SYMMETRY_TOLERANCE * scale {
                return Err(Error::NotSymmetric { row: i, col: j });
            }
        }
    }
    let mut s = DMatrix::zeros(p, p);
    for j in 0..p {
        let mut pivot = c[(j, j)];
        for k in 0..j {
            pivot -= s[(j, k)] * s[(j, k)];
        }
        if !(pivot > 0.0) {
            return Err(Error::NotPositiveDefinite {
                pivot: j,
                value: pivot,
            });
        }
        let d = pivot.sqrt();
        s[(j, j)] = d;
        for i in (j + 1)..p {
            let mut v = c[(i, j)];
            for k in 0..j {
                v -= s[(i, k)] * s[(j, k)];
            }
            s[(i, j)] = v / d;
        }
    }
    Ok(s)
}

/// `m + S eps` for a posterior `q`.
pub fn sample_posterior(q: &GaussianSpec, eps: &StandardNormalDraw) -> Result<LatentVector> {
    if eps.values.len() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            found: eps.values.len(),
        });
    }
    let mut out = vec![0.0; q.dim()];
    q.sample_into(&eps.values, &mut out);
    LatentVector::from_slice(&out)
}

/// `KL(q || p)` between two multivariate normals, using triangular solves
/// against the factor of `p`.
pub fn kl_mvn(q: &GaussianSpec, p: &GaussianSpec) -> Result<f64> {
    let dim = q.dim();
    if p.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: p.dim(),
        });
    }
    let sp = p.factor();
    // ||Sp⁻¹ Sq||²_F = Tr(Cp⁻¹ Cq)
    let whitened = sp
        .solve_lower_triangular(q.factor())
        .ok_or(Error::NotPositiveDefinite {
            pivot: 0,
            value: 0.0,
        })?;
    let trace = whitened.norm_squared();
    let diff = q.mean() - p.mean();
    let z = sp
        .solve_lower_triangular(&diff)
        .ok_or(Error::NotPositiveDefinite {
            pivot: 0,
            value: 0.0,
        })?;
    let log_det_ratio = q.log_det_covariance() - p.log_det_covariance();
    Ok(0.5 * (trace - log_det_ratio - dim as f64 + z.norm_squared()))
}
