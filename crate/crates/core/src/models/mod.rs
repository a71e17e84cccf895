//! Nonlinear forward models `g(θ)` evaluated over a fixed design.
//!
//! A model instance owns its design (sample times, ASL acquisition layout or
//! a regression matrix), so evaluation only needs the parameter vector and
//! the subset of sample indices in the current mini-batch.

mod asl;
mod biexp;
mod linear;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use asl::{expand_asl_times, AslDesign, AslModel};
pub use biexp::BiexpModel;
pub use linear::LinearModel;

pub const BIEXP: &str = "biexp";
pub const ASL_PCASL: &str = "asl-pcasl";
pub const LINEAR: &str = "linear";

/// Names of every model selectable by string.
pub const REGISTERED_MODELS: [&str; 3] = [BIEXP, ASL_PCASL, LINEAR];

/// Sample times of a series, in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignGrid {
    pub times: Vec<f64>,
}

impl DesignGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvariantViolation("design grid has no samples".into()));
        }
        if let Some(i) = times.iter().position(|t| !t.is_finite()) {
            return Err(Error::InvariantViolation(format!(
                "design time {i} is not finite"
            )));
        }
        Ok(Self { times })
    }

    /// `n` points evenly spaced over `[start, end]`.
    pub fn linspace(start: f64, end: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Self::new(vec![start; n]);
        }
        let step = (end - start) / (n - 1) as f64;
        Self::new((0..n).map(|i| start + step * i as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSignature {
    parameter_names: Vec<String>,
}

impl ModelSignature {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let parameter_names: Vec<String> = names.into_iter().map(Into::into).collect();
        for (i, n) in parameter_names.iter().enumerate() {
            if parameter_names[..i].contains(n) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate parameter name `{n}`"
                )));
            }
        }
        Ok(Self { parameter_names })
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.parameter_names
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_names.len()
    }
}

pub trait ForwardModel: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn signature(&self) -> &ModelSignature;

    /// Number of samples `N` in the design.
    fn data_len(&self) -> usize;

    /// Writes `g(θ)` at each of `indices` into `out`.
    fn predict(&self, params: &[f64], indices: &[usize], out: &mut [f64]);

    /// Writes `g(θ)` into `out` and `∂g/∂θ` into `jac`, row-major with one
    /// row of length `P` per index.
    fn predict_with_jacobian(
        &self,
        params: &[f64],
        indices: &[usize],
        out: &mut [f64],
        jac: &mut [f64],
    );

    /// Initial posterior mean and standard deviations for the model
    /// parameters given one data series. The default copies the prior.
    fn data_driven_init(
        &self,
        _y: &[f64],
        prior_mean: &[f64],
        prior_sds: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        (prior_mean.to_vec(), prior_sds.to_vec())
    }
}

fn check_params(model: &dyn ForwardModel, params: &[f64]) -> Result<()> {
    let expected = model.signature().parameter_count();
    if params.len() != expected {
        return Err(Error::ParamCountMismatch {
            model: model.name().to_string(),
            expected,
            found: params.len(),
        });
    }
    Ok(())
}

fn check_finite<'a>(model: &dyn ForwardModel, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteOutput {
            model: model.name().to_string(),
        })
    }
}

/// `g(θ)` over the full design.
pub fn model_evaluate(model: &dyn ForwardModel, params: &[f64]) -> Result<DVector<f64>> {
    check_params(model, params)?;
    let n = model.data_len();
    let indices: Vec<usize> = (0..n).collect();
    let mut out = vec![0.0; n];
    model.predict(params, &indices, &mut out);
    check_finite(model, &out)?;
    Ok(DVector::from_vec(out))
}

/// `N × P` Jacobian `∂g(t_j)/∂θ_k` over the full design.
pub fn model_jacobian(model: &dyn ForwardModel, params: &[f64]) -> Result<DMatrix<f64>> {
    check_params(model, params)?;
    let n = model.data_len();
    let p = params.len();
    let indices: Vec<usize> = (0..n).collect();
    let mut out = vec![0.0; n];
    let mut jac = vec![0.0; n * p];
    model.predict_with_jacobian(params, &indices, &mut out, &mut jac);
    check_finite(model, out.iter().chain(&jac))?;
    Ok(DMatrix::from_row_slice(n, p, &jac))
}

/// Design accepted by [`build_model`].
#[derive(Clone, Debug)]
pub enum ModelDesign {
    Times(DesignGrid),
    Asl { design: AslDesign, slice_index: usize },
    Matrix(DMatrix<f64>),
}

/// Constructs a registered model by name.
///
/// `linear` over a time grid uses the straight-line basis `[1, t]`.
pub fn build_model(name: &str, design: &ModelDesign) -> Result<Arc<dyn ForwardModel>> {
    match (name, design) {
        (BIEXP, ModelDesign::Times(grid)) => Ok(Arc::new(BiexpModel::new(grid.clone()))),
        (ASL_PCASL, ModelDesign::Asl { design, slice_index }) => {
            Ok(Arc::new(AslModel::new(design.clone(), *slice_index)?))
        }
        (LINEAR, ModelDesign::Matrix(x)) => Ok(Arc::new(LinearModel::new(x.clone())?)),
        (LINEAR, ModelDesign::Times(grid)) => Ok(Arc::new(LinearModel::straight_line(grid)?)),
        (BIEXP | ASL_PCASL | LINEAR, _) => Err(Error::InvalidConfig(format!(
            "model `{name}` cannot be built from this design"
        ))),
        (other, _) => Err(Error::UnknownModel(other.to_string())),
    }
}
