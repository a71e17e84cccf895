//! `svb`: simulate datasets, fit them, run the convergence sweeps and plot
//! free-energy traces.

mod args;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use svb_core::harness::{self, InitStudySpec, SweepSpec};
use svb_core::io::{self, DatasetMetadata, RunConfig, SeriesDataset, SeriesOutcome};
use svb_core::models;
use svb_core::optimizer::fit_many_with;
use svb_core::Problem;

use args::{AslFitArgs, Cli, Command, FitCommon, InitStudyArgs, PlotArgs, SimulateArgs, SweepArgs, Timing};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] svb_core::Error),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    /// Outputs were written but some series could not be fitted.
    #[error("{failed} of {total} series failed")]
    PartialFailure { failed: usize, total: usize },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(&a.common, Some(a.seed), false),
        Command::AslFit(a) => asl_fit(a),
        Command::Sweep(a) => sweep(a),
        Command::InitStudy(a) => init_study(a),
        Command::Plot(a) => plot(a),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let spec = a.sim.spec(a.seed)?;
    let set = harness::simulate(&spec)?;
    let dataset = SeriesDataset {
        metadata: DatasetMetadata {
            model: spec.model.clone(),
            times: Some(set.grid.times.clone()),
            asl: None,
            design_matrix: None,
            column_tags: None,
            units: "s".into(),
            mask: None,
        },
        values: set.series().into_iter().map(<[f64]>::to_vec).collect(),
    };
    io::save_dataset(&dataset, &a.out)?;
    Ok(())
}

/// Sibling of the dataset stem with `suffix` appended.
fn beside(data: &Path, suffix: &str) -> PathBuf {
    let (meta, _) = io::dataset_paths(data);
    let mut s = meta.with_extension("").into_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_config(common: &FitCommon, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    common.optimizer.apply(&mut config.optimizer);
    if let Some(seed) = seed {
        config.optimizer.seed = seed;
    }
    if let Some(init) = common.init {
        config.init = init.into();
    }
    if let Some(sd) = common.initial_sd {
        config.initial_sd = Some(sd);
    }
    config
        .optimizer
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

fn fit(common: &FitCommon, seed: Option<u64>, asl: bool) -> Result<()> {
    let config = load_config(common, seed)?;
    let mut dataset = io::load_dataset(&common.data)?;
    if asl {
        if dataset.metadata.model != models::ASL_PCASL {
            return Err(svb_core::Error::InvalidConfig(format!(
                "asl-fit needs a `{}` dataset, found `{}`",
                models::ASL_PCASL,
                dataset.metadata.model
            ))
            .into());
        }
        if dataset.metadata.column_tags.is_some() {
            dataset = io::asl_differenced(&dataset)?;
        }
    } else if dataset.metadata.column_tags.is_some() {
        return Err(CliError::Usage(
            "tagged control/label data must be fitted with `asl-fit`".into(),
        ));
    }
    let rows = dataset.selected_rows();
    let models_per_row = rows
        .iter()
        .map(|&r| dataset.model_for_row(r))
        .collect::<svb_core::Result<Vec<_>>>()?;
    let problems = rows
        .iter()
        .zip(&models_per_row)
        .map(|(&r, m)| Problem::new(m.clone(), dataset.values[r].clone()))
        .collect::<svb_core::Result<Vec<_>>>()?;
    let Some(first) = models_per_row.first() else {
        return Err(svb_core::Error::InvariantViolation("no series selected".into()).into());
    };
    let prior = config.prior_for(first.as_ref())?;
    let fallback = config.init.to_strategy()?;
    // An init that cannot be resolved fails inside the fit and is reported per series.
    let inits: Vec<_> = problems
        .iter()
        .map(|p| config.init_for(p, &prior).unwrap_or_else(|_| fallback.clone()))
        .collect();
    let joint = fit_many_with(&problems, &prior, |i| inits[i].clone(), &config.optimizer);

    let outcomes: Vec<SeriesOutcome> = rows
        .iter()
        .zip(models_per_row)
        .zip(joint.outcomes)
        .map(|((&series_id, model), result)| SeriesOutcome {
            series_id,
            model,
            result,
        })
        .collect();
    for o in &outcomes {
        if let Err(e) = &o.result {
            eprintln!("series {}: {e}", o.series_id);
        }
    }

    let results = common
        .results
        .clone()
        .or(config.output.results.clone())
        .unwrap_or_else(|| beside(&common.data, ".results.csv"));
    let w = create(&results)?;
    let mut w = w;
    io::write_results_csv(&outcomes, &mut w, common.timing == Timing::Wall)?;
    finish(w, &results)?;

    let posteriors = common
        .posteriors
        .clone()
        .or(config.output.posteriors.clone())
        .unwrap_or_else(|| beside(&common.data, ".posteriors.json"));
    let mut w = create(&posteriors)?;
    io::write_posteriors_json(&outcomes, &mut w)?;
    finish(w, &posteriors)?;

    if let Some(trace) = common.trace.clone().or(config.output.trace.clone()) {
        let mut w = create(&trace)?;
        io::write_trace_csv(&outcomes, &mut w)?;
        finish(w, &trace)?;
    }

    let failed = outcomes.iter().filter(|o| o.result.is_err()).count();
    if failed > 0 {
        return Err(CliError::PartialFailure {
            failed,
            total: outcomes.len(),
        });
    }
    Ok(())
}

fn asl_fit(a: AslFitArgs) -> Result<()> {
    fit(&a.common, a.seed, true)
}

fn sweep(a: SweepArgs) -> Result<()> {
    let sim = a.sim.spec(a.seed)?;
    let mut base = svb_core::OptimizerConfig {
        seed: a.seed,
        ..Default::default()
    };
    a.optimizer.apply(&mut base);
    let axis = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
    let spec = SweepSpec {
        learning_rates: axis(&a.learning_rates, base.learning_rate),
        sample_counts: if a.sample_counts.is_empty() {
            vec![base.sample_count]
        } else {
            a.sample_counts.clone()
        },
        batch_sizes: if a.batch_sizes.is_empty() {
            vec![base.batch_size.unwrap_or(sim.n_points)]
        } else {
            a.batch_sizes.clone()
        },
        structures: if a.structures.is_empty() {
            vec![base.structure]
        } else {
            a.structures.clone()
        },
        repetitions: a.repetitions,
        initial_sd: a.initial_sd,
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let table = harness::run_sweep(&sim, &spec, a.prior, a.init, &base)?;
    for notice in &table.notices {
        eprintln!("note: {notice}");
    }
    let mut w = create(&a.out)?;
    harness::write_sweep_csv(&table, &mut w, a.timing == Timing::Wall)?;
    finish(w, &a.out)
}

fn init_study(a: InitStudyArgs) -> Result<()> {
    let sim = a.sim.spec(a.seed)?;
    let mut config = svb_core::OptimizerConfig {
        seed: a.seed,
        ..Default::default()
    };
    a.optimizer.apply(&mut config);
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let priors = if a.priors.is_empty() {
        harness::PriorScenario::ALL.to_vec()
    } else {
        a.priors.clone()
    };
    let inits = if a.inits.is_empty() {
        harness::PosteriorScenario::ALL.to_vec()
    } else {
        a.inits.clone()
    };
    let study = InitStudySpec {
        repetitions: a.repetitions,
        initial_sd: a.initial_sd,
        ..InitStudySpec::cross(&priors, &inits)
    };
    let rows = harness::run_init_study(&sim, &study, &config)?;
    let mut w = create(&a.out)?;
    harness::write_init_csv(&rows, &mut w, a.timing == Timing::Wall)?;
    finish(w, &a.out)
}

fn plot(a: PlotArgs) -> Result<()> {
    let traces = io::read_trace_csv(&a.trace)?;
    if traces.is_empty() {
        return Err(svb_core::Error::InvariantViolation(format!("{} holds no traces", a.trace.display())).into());
    }
    let mut w = create(&a.out)?;
    w.write_all(io::render_svg(&traces).as_bytes())
        .map_err(|source| CliError::File {
            path: a.out.clone(),
            source,
        })?;
    finish(w, &a.out)
}
