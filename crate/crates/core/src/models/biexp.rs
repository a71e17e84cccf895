use super::{DesignGrid, ForwardModel, ModelSignature, BIEXP};

/// `A1 exp(-R1 t) + A2 exp(-R2 t)` with parameters `(A1, R1, A2, R2)`.
#[derive(Clone, Debug)]
pub struct BiexpModel {
    grid: DesignGrid,
    signature: ModelSignature,
}

impl BiexpModel {
    pub fn new(grid: DesignGrid) -> Self {
        Self {
            grid,
            signature: ModelSignature::new(["amp1", "rate1", "amp2", "rate2"])
                .expect("distinct names"),
        }
    }

    pub fn grid(&self) -> &DesignGrid {
        &self.grid
    }
}

impl ForwardModel for BiexpModel {
    fn name(&self) -> &str {
        BIEXP
    }

    fn signature(&self) -> &ModelSignature {
        &self.signature
    }

    fn data_len(&self) -> usize {
        self.grid.len()
    }

    fn predict(&self, params: &[f64], indices: &[usize], out: &mut [f64]) {
        let (a1, r1, a2, r2) = (params[0], params[1], params[2], params[3]);
        for (o, &j) in out.iter_mut().zip(indices) {
            let t = self.grid.times[j];
            *o = a1 * (-r1 * t).exp() + a2 * (-r2 * t).exp();
        }
    }

    fn predict_with_jacobian(
        &self,
        params: &[f64],
        indices: &[usize],
        out: &mut [f64],
        jac: &mut [f64],
    ) {
        let (a1, r1, a2, r2) = (params[0], params[1], params[2], params[3]);
        for ((o, row), &j) in out.iter_mut().zip(jac.chunks_exact_mut(4)).zip(indices) {
            let t = self.grid.times[j];
            let e1 = (-r1 * t).exp();
            let e2 = (-r2 * t).exp();
            *o = a1 * e1 + a2 * e2;
            row[0] = e1;
            row[1] = -a1 * t * e1;
            row[2] = e2;
            row[3] = -a2 * t * e2;
        }
    }

    /// Both amplitudes start at half the largest absolute data value; rates
    /// keep the prior mean.
    fn data_driven_init(
        &self,
        y: &[f64],
        prior_mean: &[f64],
        prior_sds: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let half_max = 0.5 * y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut mean = prior_mean.to_vec();
        mean[0] = half_max;
        mean[2] = half_max;
        (mean, prior_sds.to_vec())
    }
}
