//! Simulated experiments: noisy realizations of a known model, parameter
//! sweeps over the optimizer settings and the initialization study.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::free_energy::Problem;
use crate::gaussian::{DrawSource, GaussianSpec, Structure};
use crate::io::format_f64;
use crate::models::{self, build_model, DesignGrid, ForwardModel, ModelDesign};
use crate::optimizer::{fit_many_with, sample_variance, FitResult, InitStrategy, ManyFit, OptimizerConfig};

/// Sd of every coordinate of the informative prior.
pub const INFORMATIVE_SD: f64 = 2.0;
/// Default sd of every coordinate of the True, Data and Wrong initial
/// posteriors.
pub const DEFAULT_INITIAL_SD: f64 = 0.3;
/// Mean and sd of the noninformative prior.
pub const NONINFORMATIVE_MEAN: f64 = 1.0;
pub const NONINFORMATIVE_SD: f64 = 1e6;

/// Simulation streams live above every stream index the optimizer uses.
const SIMULATION_STREAM: u64 = 1 << 63;

/// Learning rates, sample counts and batch sizes of the published sweeps.
pub const LEARNING_RATES: [f64; 7] = [0.005, 0.01, 0.02, 0.05, 0.1, 0.25, 0.5];
pub const SAMPLE_COUNTS: [usize; 8] = [1, 2, 5, 10, 20, 50, 100, 200];
pub const BATCH_SIZES: [usize; 5] = [5, 10, 20, 50, 100];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub model: String,
    /// Model parameters used to generate the data.
    pub truth: Vec<f64>,
    pub n_points: usize,
    #[serde(default)]
    pub t_start: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    pub noise_sd: f64,
    #[serde(default = "default_realizations")]
    pub n_realizations: usize,
    pub seed: u64,
}

fn default_t_end() -> f64 {
    5.0
}

fn default_realizations() -> usize {
    1000
}

impl SimulationSpec {
    /// Two components with amplitudes 10 and rates 1 and 10.
    pub fn biexp(n_points: usize, noise_sd: f64, n_realizations: usize, seed: u64) -> Self {
        Self {
            model: models::BIEXP.to_string(),
            truth: vec![10.0, 1.0, 10.0, 10.0],
            n_points,
            t_start: 0.0,
            t_end: 5.0,
            noise_sd,
            n_realizations,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sd > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise_sd must be positive, got {}",
                self.noise_sd
            )));
        }
        if self.n_points < 2 {
            return Err(Error::InvalidConfig(format!(
                "n_points must be at least 2, got {}",
                self.n_points
            )));
        }
        if !(self.t_end > self.t_start) {
            return Err(Error::InvalidConfig("t_end must exceed t_start".into()));
        }
        if self.truth.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("truth must be finite".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<DesignGrid> {
        DesignGrid::linspace(self.t_start, self.t_end, self.n_points)
    }
}

/// Noisy realizations of one model, each bound into a [`Problem`].
#[derive(Clone, Debug)]
pub struct ProblemSet {
    pub model: Arc<dyn ForwardModel>,
    pub grid: DesignGrid,
    pub truth: Vec<f64>,
    pub noise_sd: f64,
    /// The noiseless curve.
    pub clean: Vec<f64>,
    pub problems: Vec<Problem>,
}

impl ProblemSet {
    pub fn len(&self) -> usize {
        self.problems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.problems.is_empty()
    }

    /// Truth extended with the noise coordinate `ln σ²`.
    pub fn true_latent(&self) -> Vec<f64> {
        let mut v = self.truth.clone();
        v.push((self.noise_sd * self.noise_sd).ln());
        v
    }

    pub fn latent_names(&self) -> Vec<String> {
        latent_names(self.model.as_ref())
    }

    pub fn series(&self) -> Vec<&[f64]> {
        self.problems.iter().map(|p| p.data()).collect()
    }
}

/// Parameter names of the model followed by the noise coordinate.
pub fn latent_names(model: &dyn ForwardModel) -> Vec<String> {
    let mut names = model.signature().parameter_names().to_vec();
    names.push(NOISE_PARAMETER.to_string());
    names
}

pub const NOISE_PARAMETER: &str = "log_noise_var";

/// Draws `n_realizations` noisy copies of the model curve at `truth`.
pub fn simulate(spec: &SimulationSpec) -> Result<ProblemSet> {
    spec.validate()?;
    let grid = spec.grid()?;
    let model = build_model(&spec.model, &ModelDesign::Times(grid.clone()))?;
    let clean = models::model_evaluate(model.as_ref(), &spec.truth)?;
    let problems = (0..spec.n_realizations)
        .map(|r| {
            let mut rng = DrawSource::new(spec.seed, SIMULATION_STREAM | r as u64).rng(0);
            let y = clean
                .iter()
                .map(|c| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    c + spec.noise_sd * e
                })
                .collect();
            Problem::new(model.clone(), y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProblemSet {
        model,
        grid,
        truth: spec.truth.clone(),
        noise_sd: spec.noise_sd,
        clean: clean.iter().copied().collect(),
        problems,
    })
}

/// Relabels biexponential components so the first has the slower rate.
pub fn normalize_components(estimate: [f64; 4]) -> [f64; 4] {
    let [a1, r1, a2, r2] = estimate;
    if r1 > r2 {
        [a2, r2, a1, r1]
    } else {
        estimate
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorScenario {
    /// Centred on the truth with sd 2 on every coordinate.
    Informative,
    /// Mean 1, sd 10⁶ on every coordinate.
    Noninformative,
}

impl PriorScenario {
    pub const ALL: [PriorScenario; 2] = [PriorScenario::Informative, PriorScenario::Noninformative];

    pub fn prior(&self, set: &ProblemSet) -> Result<GaussianSpec> {
        let p = set.truth.len() + 1;
        match self {
            PriorScenario::Informative => {
                GaussianSpec::from_sds(DVector::from_vec(set.true_latent()), &vec![INFORMATIVE_SD; p], Structure::Full)
            }
            PriorScenario::Noninformative => GaussianSpec::from_sds(
                DVector::from_element(p, NONINFORMATIVE_MEAN),
                &vec![NONINFORMATIVE_SD; p],
                Structure::Full,
            ),
        }
    }
}

impl fmt::Display for PriorScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriorScenario::Informative => "informative",
            PriorScenario::Noninformative => "noninformative",
        })
    }
}

impl FromStr for PriorScenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "informative" => Ok(PriorScenario::Informative),
            "noninformative" => Ok(PriorScenario::Noninformative),
            _ => Err(Error::InvalidConfig(format!("unknown prior scenario `{s}`"))),
        }
    }
}

/// Initial posterior of the study. Every scenario except `Uninformed` takes
/// a common sd on every coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosteriorScenario {
    /// Centred on the truth.
    True,
    /// Amplitudes from the series maximum, rates from the prior mean and
    /// noise from the sample variance.
    Data,
    /// Amplitudes 100 and rates 1.
    Wrong,
    /// Same as the noninformative prior.
    Uninformed,
}

impl PosteriorScenario {
    pub const ALL: [PosteriorScenario; 4] = [
        PosteriorScenario::True,
        PosteriorScenario::Data,
        PosteriorScenario::Wrong,
        PosteriorScenario::Uninformed,
    ];

    /// Initial posterior for realization `index` with sd `sd` on every
    /// coordinate (ignored by `Uninformed`).
    pub fn init(&self, set: &ProblemSet, prior: &GaussianSpec, index: usize, sd: f64) -> Result<InitStrategy> {
        if !(sd > 0.0 && sd.is_finite()) {
            return Err(Error::InvalidConfig(format!("initial sd must be positive, got {sd}")));
        }
        let p = set.truth.len() + 1;
        let sds = vec![sd; p];
        let mean = match self {
            PosteriorScenario::True => set.true_latent(),
            PosteriorScenario::Data => {
                let y = set.problems[index].data();
                let prior_mean: Vec<f64> = prior.mean().iter().copied().collect();
                let (mut mean, _) = set.model.data_driven_init(y, &prior_mean[..p - 1], &sds[..p - 1]);
                let variance = sample_variance(y);
                mean.push(if variance > 0.0 { variance.ln() } else { prior_mean[p - 1] });
                mean
            }
            PosteriorScenario::Wrong => {
                if set.model.name() != models::BIEXP {
                    return Err(Error::InvalidConfig(format!(
                        "the wrong initial posterior is defined for `{}` only",
                        models::BIEXP
                    )));
                }
                vec![100.0, 1.0, 100.0, 1.0, set.true_latent()[4]]
            }
            PosteriorScenario::Uninformed => {
                return Ok(InitStrategy::Custom(GaussianSpec::from_sds(
                    DVector::from_element(p, NONINFORMATIVE_MEAN),
                    &vec![NONINFORMATIVE_SD; p],
                    Structure::Full,
                )?))
            }
        };
        Ok(InitStrategy::Custom(GaussianSpec::from_sds(
            DVector::from_vec(mean),
            &sds,
            Structure::Full,
        )?))
    }
}

impl fmt::Display for PosteriorScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosteriorScenario::True => "true",
            PosteriorScenario::Data => "data",
            PosteriorScenario::Wrong => "wrong",
            PosteriorScenario::Uninformed => "uninformed",
        })
    }
}

impl FromStr for PosteriorScenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "true" => Ok(PosteriorScenario::True),
            "data" => Ok(PosteriorScenario::Data),
            "wrong" => Ok(PosteriorScenario::Wrong),
            "uninformed" => Ok(PosteriorScenario::Uninformed),
            _ => Err(Error::InvalidConfig(format!("unknown initial posterior `{s}`"))),
        }
    }
}

/// Axes of a sweep. Every combination of the listed values is one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub learning_rates: Vec<f64>,
    pub sample_counts: Vec<usize>,
    /// Batch sizes above `N` are dropped with a notice.
    pub batch_sizes: Vec<usize>,
    pub structures: Vec<Structure>,
    /// Each cell is run this many times with seeds `seed, seed + 1, …`.
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_initial_sd")]
    pub initial_sd: f64,
}

fn default_initial_sd() -> f64 {
    DEFAULT_INITIAL_SD
}

fn default_repetitions() -> usize {
    1
}

impl SweepSpec {
    /// A single cell.
    pub fn cell(learning_rate: f64, sample_count: usize, batch_size: usize, structure: Structure) -> Self {
        Self {
            learning_rates: vec![learning_rate],
            sample_counts: vec![sample_count],
            batch_sizes: vec![batch_size],
            structures: vec![structure],
            repetitions: 1,
            initial_sd: DEFAULT_INITIAL_SD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty()
            || self.sample_counts.is_empty()
            || self.batch_sizes.is_empty()
            || self.structures.is_empty()
        {
            return Err(Error::InvalidConfig("every sweep axis needs at least one value".into()));
        }
        if self.learning_rates.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if self.sample_counts.contains(&0) || self.batch_sizes.contains(&0) {
            return Err(Error::InvalidConfig("sample counts and batch sizes must be positive".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::InvalidConfig("repetitions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParameterSummary {
    pub name: String,
    pub median: Option<f64>,
    pub iqr: Option<f64>,
}

/// Aggregate over every fit of one cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub fits: usize,
    pub failures: usize,
    pub mean_best_free_energy: Option<f64>,
    pub mean_convergence_epoch: Option<f64>,
    pub median_convergence_epoch: Option<f64>,
    pub mean_convergence_time_s: Option<f64>,
    pub median_convergence_time_s: Option<f64>,
    /// Share of fits whose best free energy comes within the tolerance of
    /// the best value any cell of the table reached on the same realization.
    pub fraction_converged: Option<f64>,
    /// Medians and IQRs of posterior means; biexponential components are
    /// normalized first.
    pub parameters: Vec<ParameterSummary>,
    /// Best free energy per realization and repetition, `None` on failure.
    #[serde(skip)]
    pub best_free_energies: Vec<Option<f64>>,
}

/// Summarizes the outcomes of one joint fit.
pub fn summarize(set: &ProblemSet, runs: &[ManyFit]) -> CellSummary {
    let names = set.latent_names();
    let normalize = set.model.name() == models::BIEXP;
    let mut best = Vec::new();
    let mut done: Vec<&FitResult> = Vec::new();
    let mut failures = 0;
    for run in runs {
        for outcome in &run.outcomes {
            match outcome {
                Ok(r) => {
                    best.push(r.best_free_energy);
                    done.push(r);
                }
                Err(_) => {
                    best.push(None);
                    failures += 1;
                }
            }
        }
    }
    let estimates: Vec<Vec<f64>> = done
        .iter()
        .map(|r| {
            let mut m: Vec<f64> = r.posterior.mean().iter().copied().collect();
            if normalize {
                let n = normalize_components([m[0], m[1], m[2], m[3]]);
                m[..4].copy_from_slice(&n);
            }
            m
        })
        .collect();
    let parameters = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let mut column: Vec<f64> = estimates.iter().map(|e| e[k]).collect();
            ParameterSummary {
                name: name.clone(),
                median: quantile(&mut column, 0.5),
                iqr: quantile(&mut column, 0.75).zip(quantile(&mut column, 0.25)).map(|(a, b)| a - b),
            }
        })
        .collect();
    let mut epochs: Vec<f64> = done.iter().filter_map(|r| r.convergence_epoch).map(|e| e as f64).collect();
    let mut times: Vec<f64> = done.iter().filter_map(|r| r.wall_time_to_convergence).collect();
    let bests: Vec<f64> = best.iter().flatten().copied().collect();
    CellSummary {
        fits: best.len(),
        failures,
        mean_best_free_energy: mean(&bests),
        mean_convergence_epoch: mean(&epochs),
        median_convergence_epoch: quantile(&mut epochs, 0.5),
        mean_convergence_time_s: mean(&times),
        median_convergence_time_s: quantile(&mut times, 0.5),
        fraction_converged: None,
        parameters,
        best_free_energies: best,
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Linearly interpolated sample quantile. Sorts `v` in place.
pub fn quantile(v: &mut [f64], q: f64) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let h = q * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Fills `fraction_converged` against the per-realization best over `cells`.
fn mark_converged(cells: &mut [&mut CellSummary], tolerance: f64) {
    let len = cells.iter().map(|c| c.best_free_energies.len()).max().unwrap_or(0);
    let reference: Vec<Option<f64>> = (0..len)
        .map(|i| {
            cells
                .iter()
                .filter_map(|c| c.best_free_energies.get(i).copied().flatten())
                .fold(None, |m: Option<f64>, f| Some(m.map_or(f, |m| m.max(f))))
        })
        .collect();
    for cell in cells.iter_mut() {
        if cell.best_free_energies.is_empty() {
            continue;
        }
        let hits = cell
            .best_free_energies
            .iter()
            .zip(&reference)
            .filter(|(b, r)| match (b, r) {
                (Some(b), Some(r)) => *b >= r - tolerance * r.abs(),
                _ => false,
            })
            .count();
        cell.fraction_converged = Some(hits as f64 / cell.best_free_energies.len() as f64);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub learning_rate: f64,
    pub sample_count: usize,
    pub batch_size: usize,
    pub structure: Structure,
    pub summary: CellSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Cells skipped because of the axis constraints.
    pub notices: Vec<String>,
}

fn run_cell(
    set: &ProblemSet,
    prior: &GaussianSpec,
    init: PosteriorScenario,
    config: &OptimizerConfig,
    repetitions: usize,
    initial_sd: f64,
) -> Result<CellSummary> {
    let inits = (0..set.len())
        .map(|i| init.init(set, prior, i, initial_sd))
        .collect::<Result<Vec<_>>>()?;
    let runs: Vec<ManyFit> = (0..repetitions)
        .map(|rep| {
            let config = OptimizerConfig {
                seed: config.seed.wrapping_add(rep as u64),
                ..config.clone()
            };
            fit_many_with(&set.problems, prior, |i| inits[i].clone(), &config)
        })
        .collect();
    Ok(summarize(set, &runs))
}

/// Runs every cell of `sweep` on the realizations of `sim`. Settings not
/// swept come from `base`.
pub fn run_sweep(
    sim: &SimulationSpec,
    sweep: &SweepSpec,
    prior: PriorScenario,
    init: PosteriorScenario,
    base: &OptimizerConfig,
) -> Result<SweepTable> {
    sweep.validate()?;
    let set = simulate(sim)?;
    let prior_spec = prior.prior(&set)?;
    let n = sim.n_points;
    let mut notices = Vec::new();
    let mut batch_sizes = Vec::new();
    for &b in &sweep.batch_sizes {
        if b > n {
            notices.push(format!("batch size {b} exceeds N = {n} and was skipped"));
        } else {
            batch_sizes.push(b);
        }
    }
    let mut rows = Vec::new();
    for &structure in &sweep.structures {
        for &learning_rate in &sweep.learning_rates {
            for &sample_count in &sweep.sample_counts {
                for &batch_size in &batch_sizes {
                    let config = OptimizerConfig {
                        learning_rate,
                        sample_count,
                        batch_size: Some(batch_size),
                        structure,
                        ..base.clone()
                    };
                    config.validate()?;
                    let summary = run_cell(&set, &prior_spec, init, &config, sweep.repetitions, sweep.initial_sd)?;
                    rows.push(SweepRow {
                        learning_rate,
                        sample_count,
                        batch_size,
                        structure,
                        summary,
                    });
                }
            }
        }
    }
    let mut cells: Vec<&mut CellSummary> = rows.iter_mut().map(|r| &mut r.summary).collect();
    mark_converged(&mut cells, base.convergence_tolerance_fraction);
    Ok(SweepTable { rows, notices })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InitRow {
    pub prior: PriorScenario,
    pub init: PosteriorScenario,
    pub summary: CellSummary,
}

/// Scenario combinations of an initialization study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitStudySpec {
    pub scenarios: Vec<(PriorScenario, PosteriorScenario)>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_initial_sd")]
    pub initial_sd: f64,
}

impl InitStudySpec {
    /// Every prior crossed with every initial posterior.
    pub fn full() -> Self {
        Self::cross(&PriorScenario::ALL, &PosteriorScenario::ALL)
    }

    pub fn cross(priors: &[PriorScenario], inits: &[PosteriorScenario]) -> Self {
        Self {
            scenarios: priors
                .iter()
                .flat_map(|&p| inits.iter().map(move |&i| (p, i)))
                .collect(),
            repetitions: 1,
            initial_sd: DEFAULT_INITIAL_SD,
        }
    }
}

/// Fits every prior and initial-posterior combination with one optimizer
/// configuration. Convergence fractions compare rows sharing a prior.
pub fn run_init_study(sim: &SimulationSpec, study: &InitStudySpec, config: &OptimizerConfig) -> Result<Vec<InitRow>> {
    config.validate()?;
    if study.repetitions == 0 {
        return Err(Error::InvalidConfig("repetitions must be positive".into()));
    }
    let set = simulate(sim)?;
    let mut rows = Vec::new();
    for &(prior, init) in &study.scenarios {
        let prior_spec = prior.prior(&set)?;
        let summary = run_cell(&set, &prior_spec, init, config, study.repetitions, study.initial_sd)?;
        rows.push(InitRow { prior, init, summary });
    }
    for prior in PriorScenario::ALL {
        let mut cells: Vec<&mut CellSummary> = rows
            .iter_mut()
            .filter(|r| r.prior == prior)
            .map(|r| &mut r.summary)
            .collect();
        mark_converged(&mut cells, config.convergence_tolerance_fraction);
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

fn summary_header(names: &[String]) -> Vec<String> {
    let mut h: Vec<String> = [
        "fits",
        "failures",
        "mean_best_F",
        "mean_conv_epoch",
        "median_conv_epoch",
        "mean_conv_time_s",
        "median_conv_time_s",
        "fraction_converged",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for n in names {
        h.push(format!("{n}_median"));
        h.push(format!("{n}_iqr"));
    }
    h
}

fn summary_fields(s: &CellSummary, timing: bool) -> Vec<String> {
    let time = |v| if timing { opt(v) } else { String::new() };
    let mut f = vec![
        s.fits.to_string(),
        s.failures.to_string(),
        opt(s.mean_best_free_energy),
        opt(s.mean_convergence_epoch),
        opt(s.median_convergence_epoch),
        time(s.mean_convergence_time_s),
        time(s.median_convergence_time_s),
        opt(s.fraction_converged),
    ];
    for p in &s.parameters {
        f.push(opt(p.median));
        f.push(opt(p.iqr));
    }
    f
}

fn parameter_names(rows: &[&CellSummary]) -> Vec<String> {
    rows.first()
        .map(|s| s.parameters.iter().map(|p| p.name.clone()).collect())
        .unwrap_or_default()
}

/// Writes a sweep table as CSV. With `timing` off the time columns are
/// left empty so that the output depends only on the seeds.
pub fn write_sweep_csv<W: Write>(table: &SweepTable, out: W, timing: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let names = parameter_names(&table.rows.iter().map(|r| &r.summary).collect::<Vec<_>>());
    let mut header = vec![
        "learning_rate".to_string(),
        "sample_count".into(),
        "batch_size".into(),
        "structure".into(),
    ];
    header.extend(summary_header(&names));
    w.write_record(&header)?;
    for r in &table.rows {
        let mut rec = vec![
            format_f64(r.learning_rate),
            r.sample_count.to_string(),
            r.batch_size.to_string(),
            r.structure.to_string(),
        ];
        rec.extend(summary_fields(&r.summary, timing));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_init_csv<W: Write>(rows: &[InitRow], out: W, timing: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let names = parameter_names(&rows.iter().map(|r| &r.summary).collect::<Vec<_>>());
    let mut header = vec!["prior".to_string(), "init".into()];
    header.extend(summary_header(&names));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.prior.to_string(), r.init.to_string()];
        rec.extend(summary_fields(&r.summary, timing));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
