use serde::{Deserialize, Serialize};

use super::{ForwardModel, ModelSignature, ASL_PCASL};
use crate::error::{Error, Result};

fn default_slice_offset() -> f64 {
    0.0452
}
fn default_t1() -> f64 {
    1.3
}
fn default_t1b() -> f64 {
    1.6
}
fn default_m0a() -> f64 {
    1.0
}
fn default_partition() -> f64 {
    0.9
}

/// Acquisition layout and physical constants of a PCASL series.
///
/// `plds` has one entry per (differenced) sample. Inversion efficiency is
/// folded into `m0a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AslDesign {
    pub plds: Vec<f64>,
    /// Label duration, seconds.
    pub tau: f64,
    /// Extra delay per slice, seconds.
    #[serde(default = "default_slice_offset")]
    pub slice_offset: f64,
    #[serde(default = "default_t1")]
    pub t1: f64,
    #[serde(default = "default_t1b")]
    pub t1b: f64,
    #[serde(default = "default_m0a")]
    pub m0a: f64,
    /// Blood/tissue partition coefficient.
    #[serde(default = "default_partition")]
    pub partition_coefficient: f64,
    /// Multiply the during-bolus branch by `exp(-Δt/T1b)` as well.
    #[serde(default)]
    pub blood_decay_in_bolus: bool,
}

impl AslDesign {
    /// Six PLDs (0.25 s to 1.5 s), each repeated eight times contiguously,
    /// with a 1.8 s label duration.
    pub fn paper_layout() -> Self {
        let plds = [0.25, 0.5, 0.75, 1.0, 1.25, 1.5]
            .iter()
            .flat_map(|&p| std::iter::repeat_n(p, 8))
            .collect();
        Self {
            plds,
            tau: 1.8,
            slice_offset: default_slice_offset(),
            t1: default_t1(),
            t1b: default_t1b(),
            m0a: default_m0a(),
            partition_coefficient: default_partition(),
            blood_decay_in_bolus: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvariantViolation(format!("ASL design: {msg}")));
        if self.plds.is_empty() {
            return bad("no PLDs");
        }
        if !(self.tau > 0.0) {
            return bad("label duration must be positive");
        }
        if self.plds.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return bad("PLDs must be finite and non-negative");
        }
        if !(self.t1 > 0.0 && self.t1b > 0.0 && self.partition_coefficient > 0.0) {
            return bad("T1, T1b and the partition coefficient must be positive");
        }
        if !(self.slice_offset.is_finite() && self.m0a.is_finite()) {
            return bad("slice offset and M0a must be finite");
        }
        Ok(())
    }
}

/// Effective sample times `tau + pld + slice_index * slice_offset`.
pub fn expand_asl_times(design: &AslDesign, slice_index: usize) -> Vec<f64> {
    let shift = design.tau + slice_index as f64 * design.slice_offset;
    design.plds.iter().map(|pld| shift + pld).collect()
}

/// Single-compartment PCASL kinetic model with parameters `(f, Δt)`.
///
/// The signal is zero before the bolus arrives, builds up while it is being
/// delivered (`Δt <= t <= Δt + tau`) and decays afterwards. The build-up
/// branch omits the `exp(-Δt/T1b)` blood-decay factor unless
/// `blood_decay_in_bolus` is set.
#[derive(Clone, Debug)]
pub struct AslModel {
    design: AslDesign,
    slice_index: usize,
    times: Vec<f64>,
    signature: ModelSignature,
}

impl AslModel {
    pub fn new(design: AslDesign, slice_index: usize) -> Result<Self> {
        design.validate()?;
        let times = expand_asl_times(&design, slice_index);
        Ok(Self {
            design,
            slice_index,
            times,
            signature: ModelSignature::new(["perfusion", "transit_time"])?,
        })
    }

    pub fn design(&self) -> &AslDesign {
        &self.design
    }

    pub fn slice_index(&self) -> usize {
        self.slice_index
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Signal and its partials with respect to `f` and `Δt` at time `t`.
    fn signal(&self, f: f64, dt: f64, t: f64) -> (f64, f64, f64) {
        if t < dt {
            return (0.0, 0.0, 0.0);
        }
        let d = &self.design;
        let t1app = 1.0 / (1.0 / d.t1 + f / d.partition_coefficient);
        // dT1app/df
        let dt1app = -t1app * t1app / d.partition_coefficient;
        let scale = 2.0 * d.m0a;
        let blood = (-dt / d.t1b).exp();
        if t <= dt + d.tau {
            let u = t - dt;
            let e = (-u / t1app).exp();
            let de_dt1app = e * u / (t1app * t1app);
            let core = scale * f * t1app * (1.0 - e);
            let d_f = scale
                * (t1app * (1.0 - e) + f * dt1app * (1.0 - e) - f * t1app * de_dt1app * dt1app);
            let d_dt = -scale * f * e;
            if d.blood_decay_in_bolus {
                (core * blood, d_f * blood, d_dt * blood - core * blood / d.t1b)
            } else {
                (core, d_f, d_dt)
            }
        } else {
            let v = t - dt - d.tau;
            let decay = (-v / t1app).exp();
            let e_tau = (-d.tau / t1app).exp();
            let fill = 1.0 - e_tau;
            let ddecay = decay * v / (t1app * t1app);
            let dfill = -e_tau * d.tau / (t1app * t1app);
            let value = scale * f * t1app * blood * decay * fill;
            let d_f = scale
                * blood
                * (t1app * decay * fill
                    + f * dt1app * (decay * fill + t1app * ddecay * fill + t1app * decay * dfill));
            let d_dt = value * (1.0 / t1app - 1.0 / d.t1b);
            (value, d_f, d_dt)
        }
    }
}

impl ForwardModel for AslModel {
    fn name(&self) -> &str {
        ASL_PCASL
    }

    fn signature(&self) -> &ModelSignature {
        &self.signature
    }

    fn data_len(&self) -> usize {
        self.times.len()
    }

    fn predict(&self, params: &[f64], indices: &[usize], out: &mut [f64]) {
        for (o, &j) in out.iter_mut().zip(indices) {
            *o = self.signal(params[0], params[1], self.times[j]).0;
        }
    }

    fn predict_with_jacobian(
        &self,
        params: &[f64],
        indices: &[usize],
        out: &mut [f64],
        jac: &mut [f64],
    ) {
        for ((o, row), &j) in out.iter_mut().zip(jac.chunks_exact_mut(2)).zip(indices) {
            let (v, d_f, d_dt) = self.signal(params[0], params[1], self.times[j]);
            *o = v;
            row[0] = d_f;
            row[1] = d_dt;
        }
    }

    /// Perfusion from the peak signal assuming a fully delivered bolus at
    /// tissue T1; transit time keeps the prior mean. Standard deviations are
    /// capped at 0.01 s⁻¹ for perfusion and 1 s for transit time so a vague
    /// prior does not produce a vague starting point.
    fn data_driven_init(
        &self,
        y: &[f64],
        prior_mean: &[f64],
        prior_sds: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let d = &self.design;
        let peak = y.iter().copied().fold(0.0f64, f64::max);
        let full_bolus = 2.0 * d.m0a * d.t1 * (1.0 - (-d.tau / d.t1).exp());
        let f0 = if full_bolus > 0.0 { peak / full_bolus } else { 0.0 };
        (
            vec![f0, prior_mean[1]],
            vec![prior_sds[0].min(0.01), prior_sds[1].min(1.0)],
        )
    }
}
