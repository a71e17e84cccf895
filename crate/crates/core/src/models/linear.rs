use nalgebra::DMatrix;

use super::{DesignGrid, ForwardModel, ModelSignature, LINEAR};
use crate::error::{Error, Result};

/// `g(θ) = X θ`. Used to check inference against closed-form posteriors.
#[derive(Clone, Debug)]
pub struct LinearModel {
    design: DMatrix<f64>,
    signature: ModelSignature,
}

impl LinearModel {
    pub fn new(design: DMatrix<f64>) -> Result<Self> {
        if design.nrows() == 0 || design.ncols() == 0 {
            return Err(Error::InvariantViolation("empty design matrix".into()));
        }
        if design.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation("design matrix is not finite".into()));
        }
        let signature = ModelSignature::new((0..design.ncols()).map(|k| format!("beta{k}")))?;
        Ok(Self { design, signature })
    }

    /// Intercept and slope over the given times.
    pub fn straight_line(grid: &DesignGrid) -> Result<Self> {
        let n = grid.len();
        let x = DMatrix::from_fn(n, 2, |j, k| if k == 0 { 1.0 } else { grid.times[j] });
        let mut model = Self::new(x)?;
        model.signature = ModelSignature::new(["intercept", "slope"])?;
        Ok(model)
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }
}

impl ForwardModel for LinearModel {
    fn name(&self) -> &str {
        LINEAR
    }

    fn signature(&self) -> &ModelSignature {
        &self.signature
    }

    fn data_len(&self) -> usize {
        self.design.nrows()
    }

    fn predict(&self, params: &[f64], indices: &[usize], out: &mut [f64]) {
        for (o, &j) in out.iter_mut().zip(indices) {
            *o = (0..params.len()).map(|k| self.design[(j, k)] * params[k]).sum();
        }
    }

    fn predict_with_jacobian(
        &self,
        params: &[f64],
        indices: &[usize],
        out: &mut [f64],
        jac: &mut [f64],
    ) {
        let p = params.len();
        self.predict(params, indices, out);
        for (row, &j) in jac.chunks_exact_mut(p).zip(indices) {
            for (k, r) in row.iter_mut().enumerate() {
                *r = self.design[(j, k)];
            }
        }
    }
}
