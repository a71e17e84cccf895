use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use svb_core::harness::{PosteriorScenario, PriorScenario, SimulationSpec, DEFAULT_INITIAL_SD};
use svb_core::io::InitConfig;
use svb_core::{OptimizerConfig, Structure};

use crate::CliError;

/// Realizations simulated when neither `--n-realizations` nor
/// `--paper-scale` is given.
const DESK_REALIZATIONS: usize = 100;
const PAPER_REALIZATIONS: usize = 1000;

#[derive(Parser, Debug)]
#[command(
    name = "svb",
    version,
    about = "Stochastic variational Bayes for nonlinear models with Gaussian noise"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write noisy realizations of a model curve as a dataset.
    Simulate(SimulateArgs),
    /// Fit every selected series of a dataset.
    Fit(FitArgs),
    /// Fit ASL data, differencing control/label pairs first when tagged.
    AslFit(AslFitArgs),
    /// Grid over learning rate, sample count, batch size and covariance structure.
    Sweep(SweepArgs),
    /// Compare prior and initial-posterior combinations.
    InitStudy(InitStudyArgs),
    /// Render free-energy traces as SVG.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Timing {
    /// Record wall-clock times.
    Wall,
    /// Leave time columns empty so outputs depend only on seed and config.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InitChoice {
    Prior,
    Data,
}

impl From<InitChoice> for InitConfig {
    fn from(c: InitChoice) -> Self {
        match c {
            InitChoice::Prior => InitConfig::Prior,
            InitChoice::Data => InitConfig::Data,
        }
    }
}

/// Overrides for [`OptimizerConfig`] fields. Each flag also accepts the
/// underscore spelling of the field name.
#[derive(Args, Debug, Default)]
pub struct OptimizerArgs {
    #[arg(long, alias = "learning_rate")]
    pub learning_rate: Option<f64>,
    #[arg(long, alias = "sample_count")]
    pub sample_count: Option<usize>,
    #[arg(long, alias = "batch_size")]
    pub batch_size: Option<usize>,
    #[arg(long, alias = "max_epochs")]
    pub max_epochs: Option<usize>,
    #[arg(long, alias = "adam_beta1")]
    pub adam_beta1: Option<f64>,
    #[arg(long, alias = "adam_beta2")]
    pub adam_beta2: Option<f64>,
    #[arg(long, alias = "adam_epsilon")]
    pub adam_epsilon: Option<f64>,
    #[arg(long, alias = "convergence_tolerance_fraction")]
    pub convergence_tolerance_fraction: Option<f64>,
    #[arg(long)]
    pub structure: Option<Structure>,
}

impl OptimizerArgs {
    pub fn apply(&self, c: &mut OptimizerConfig) {
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.sample_count {
            c.sample_count = v;
        }
        if self.batch_size.is_some() {
            c.batch_size = self.batch_size;
        }
        if let Some(v) = self.max_epochs {
            c.max_epochs = v;
        }
        if let Some(v) = self.adam_beta1 {
            c.adam_beta1 = v;
        }
        if let Some(v) = self.adam_beta2 {
            c.adam_beta2 = v;
        }
        if let Some(v) = self.adam_epsilon {
            c.adam_epsilon = v;
        }
        if let Some(v) = self.convergence_tolerance_fraction {
            c.convergence_tolerance_fraction = v;
        }
        if let Some(v) = self.structure {
            c.structure = v;
        }
    }
}

#[derive(Args, Debug)]
pub struct SimArgs {
    #[arg(long, default_value = "biexp")]
    pub model: String,
    /// Comma-separated model parameters used to generate the data.
    #[arg(long, value_delimiter = ',', default_values_t = [10.0, 1.0, 10.0, 10.0])]
    pub truth: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    pub n_points: usize,
    #[arg(long, default_value_t = 0.0)]
    pub t_start: f64,
    #[arg(long, default_value_t = 5.0)]
    pub t_end: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_sd: f64,
    /// Defaults to 100.
    #[arg(long, conflicts_with = "paper_scale")]
    pub n_realizations: Option<usize>,
    /// Simulate 1000 realizations.
    #[arg(long)]
    pub paper_scale: bool,
}

impl SimArgs {
    pub fn spec(&self, seed: u64) -> Result<SimulationSpec, CliError> {
        let n_realizations = self.n_realizations.unwrap_or(if self.paper_scale {
            PAPER_REALIZATIONS
        } else {
            DESK_REALIZATIONS
        });
        if n_realizations == 0 {
            return Err(CliError::Usage("--n-realizations must be at least 1".into()));
        }
        let spec = SimulationSpec {
            model: self.model.clone(),
            truth: self.truth.clone(),
            n_points: self.n_points,
            t_start: self.t_start,
            t_end: self.t_end,
            noise_sd: self.noise_sd,
            n_realizations,
            seed,
        };
        spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    #[arg(long)]
    pub seed: u64,
    /// Dataset stem; `<out>.json` and `<out>.csv` are written.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FitCommon {
    /// Dataset stem, or either of its two files.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON run config. Flags override its optimizer settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub init: Option<InitChoice>,
    /// Cap on the starting sds of the `data` init.
    #[arg(long)]
    pub initial_sd: Option<f64>,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    /// Defaults to `<data>.results.csv`.
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Defaults to `<data>.posteriors.json`.
    #[arg(long)]
    pub posteriors: Option<PathBuf>,
    /// Free-energy traces, one row per series.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Timing::Wall)]
    pub timing: Timing,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub common: FitCommon,
}

#[derive(Args, Debug)]
pub struct AslFitArgs {
    /// Defaults to the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: FitCommon,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    #[arg(long, value_delimiter = ',')]
    pub learning_rates: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub sample_counts: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub batch_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub structures: Vec<Structure>,
    #[arg(long, default_value_t = 1)]
    pub repetitions: usize,
    #[arg(long, default_value_t = PriorScenario::Informative)]
    pub prior: PriorScenario,
    #[arg(long, default_value_t = PosteriorScenario::Data)]
    pub init: PosteriorScenario,
    /// Initial posterior sd for the true, data and wrong scenarios.
    #[arg(long, default_value_t = DEFAULT_INITIAL_SD)]
    pub initial_sd: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Timing::Wall)]
    pub timing: Timing,
}

#[derive(Args, Debug)]
pub struct InitStudyArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    #[arg(long, value_delimiter = ',')]
    pub priors: Vec<PriorScenario>,
    #[arg(long, value_delimiter = ',')]
    pub inits: Vec<PosteriorScenario>,
    #[arg(long, default_value_t = 1)]
    pub repetitions: usize,
    #[arg(long, default_value_t = DEFAULT_INITIAL_SD)]
    pub initial_sd: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Timing::Wall)]
    pub timing: Timing,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Trace CSV written by `fit --trace`.
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}
