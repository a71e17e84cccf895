//! File formats: datasets (JSON metadata plus a headerless CSV value
//! matrix), run configurations, result tables and SVG trace plots.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{GaussianSpec, Structure};
use crate::free_energy::Problem;
use crate::harness::{latent_names, DEFAULT_INITIAL_SD, NONINFORMATIVE_MEAN, NONINFORMATIVE_SD};
use crate::models::{self, build_model, AslDesign, DesignGrid, ForwardModel, ModelDesign};
use crate::optimizer::{FitResult, InitStrategy, OptimizerConfig};

/// Shortest decimal text that parses back to the same `f64`.
pub fn format_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-5..1e16).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnTag {
    Control,
    Label,
}

/// ASL acquisition block of the metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AslMetadata {
    #[serde(flatten)]
    pub design: AslDesign,
    /// Slice of each row; all rows are slice 0 when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice_index_per_voxel: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMetadata {
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asl: Option<AslMetadata>,
    /// Regression matrix of the linear model, one row per sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design_matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column_tags: Option<Vec<ColumnTag>>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub units: String,
    /// Rows to fit; every row when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
}

/// Rows are series (realizations or voxels), columns are samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    pub metadata: DatasetMetadata,
    pub values: Vec<Vec<f64>>,
}

/// Metadata and value paths for a dataset given either file or their stem.
pub fn dataset_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json" | "csv") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("json"), with("csv"))
}

impl SeriesDataset {
    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn columns(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Indices of the rows selected by the mask.
    pub fn selected_rows(&self) -> Vec<usize> {
        match &self.metadata.mask {
            Some(mask) => (0..self.rows()).filter(|&i| mask[i]).collect(),
            None => (0..self.rows()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.metadata;
        if !models::REGISTERED_MODELS.contains(&m.model.as_str()) {
            return Err(Error::UnknownModel(m.model.clone()));
        }
        let cols = self.columns();
        for (i, row) in self.values.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::InvariantViolation(format!(
                    "row {} has {} values, expected {cols}",
                    i + 1,
                    row.len()
                )));
            }
        }
        if let Some(mask) = &m.mask {
            if mask.len() != self.rows() {
                return Err(Error::InvariantViolation(format!(
                    "mask has {} entries for {} rows",
                    mask.len(),
                    self.rows()
                )));
            }
        }
        let samples = match &m.column_tags {
            Some(tags) => {
                if tags.len() != cols {
                    return Err(Error::InvariantViolation(format!(
                        "column_tags has {} entries for {cols} columns",
                        tags.len()
                    )));
                }
                if cols % 2 != 0 {
                    return Err(Error::InvariantViolation(
                        "tagged datasets need an even column count".into(),
                    ));
                }
                cols / 2
            }
            None => cols,
        };
        let designs = [m.times.is_some(), m.asl.is_some(), m.design_matrix.is_some()];
        if designs.iter().filter(|d| **d).count() > 1 {
            return Err(Error::InvariantViolation(
                "metadata needs exactly one of `times`, `asl` and `design_matrix`".into(),
            ));
        }
        if let Some(x) = &m.design_matrix {
            if m.model != models::LINEAR {
                return Err(Error::InvariantViolation(format!(
                    "`design_matrix` is only used by model `{}`",
                    models::LINEAR
                )));
            }
            if x.len() != samples {
                return Err(Error::InvariantViolation(format!(
                    "`design_matrix` has {} rows for {samples} samples",
                    x.len()
                )));
            }
            let k = x.first().map_or(0, Vec::len);
            if let Some(i) = x.iter().position(|r| r.len() != k || k == 0) {
                return Err(Error::InvariantViolation(format!(
                    "`design_matrix` row {} has {} entries, expected {k}",
                    i + 1,
                    x[i].len()
                )));
            }
            return Ok(());
        }
        match (&m.times, &m.asl) {
            (Some(_), Some(_)) => unreachable!("checked above"),
            (Some(times), None) => {
                DesignGrid::new(times.clone())?;
                if times.len() != samples {
                    return Err(Error::InvariantViolation(format!(
                        "`times` has {} entries for {samples} samples",
                        times.len()
                    )));
                }
            }
            (None, Some(asl)) => {
                asl.design.validate()?;
                let plds = asl.design.plds.len();
                if plds == 0 || samples % plds != 0 {
                    return Err(Error::InvariantViolation(format!(
                        "`asl.plds` has {plds} entries, which does not divide {samples} samples"
                    )));
                }
                if let Some(slices) = &asl.slice_index_per_voxel {
                    if slices.len() != self.rows() {
                        return Err(Error::InvariantViolation(format!(
                            "`asl.slice_index_per_voxel` has {} entries for {} rows",
                            slices.len(),
                            self.rows()
                        )));
                    }
                }
            }
            (None, None) => {
                return Err(Error::InvariantViolation(
                    "metadata needs `times`, `asl` or `design_matrix`".into(),
                ))
            }
        }
        if m.model == models::ASL_PCASL && m.asl.is_none() {
            return Err(Error::InvariantViolation(format!(
                "model `{}` needs an `asl` block",
                m.model
            )));
        }
        Ok(())
    }

    /// ASL design with one PLD per differenced sample. Shorter PLD lists
    /// are repeated element-wise in contiguous groups.
    pub fn effective_asl_design(&self) -> Option<AslDesign> {
        let asl = self.metadata.asl.as_ref()?;
        let samples = match self.metadata.column_tags {
            Some(_) => self.columns() / 2,
            None => self.columns(),
        };
        let mut design = asl.design.clone();
        let repeat = samples / design.plds.len().max(1);
        if repeat > 1 {
            design.plds = design
                .plds
                .iter()
                .flat_map(|&p| std::iter::repeat_n(p, repeat))
                .collect();
        }
        Some(design)
    }

    /// The forward model for row `row`.
    pub fn model_for_row(&self, row: usize) -> Result<Arc<dyn ForwardModel>> {
        if self.metadata.column_tags.is_some() {
            return Err(Error::InvalidConfig(
                "tagged control/label data must be differenced before fitting".into(),
            ));
        }
        if let Some(design) = self.effective_asl_design() {
            let slice_index = self
                .metadata
                .asl
                .as_ref()
                .and_then(|a| a.slice_index_per_voxel.as_ref())
                .map_or(0, |s| s[row]);
            return build_model(&self.metadata.model, &ModelDesign::Asl { design, slice_index });
        }
        if let Some(x) = &self.metadata.design_matrix {
            let k = x.first().map_or(0, Vec::len);
            let x = DMatrix::from_fn(x.len(), k, |i, j| x[i][j]);
            return build_model(&self.metadata.model, &ModelDesign::Matrix(x));
        }
        let times = self.metadata.times.clone().unwrap_or_default();
        build_model(&self.metadata.model, &ModelDesign::Times(DesignGrid::new(times)?))
    }
}

pub fn load_dataset(path: &Path) -> Result<SeriesDataset> {
    let (meta_path, values_path) = dataset_paths(path);
    let text = read_text(&meta_path)?;
    let metadata: DatasetMetadata = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: meta_path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let values = read_matrix(&values_path)?;
    let dataset = SeriesDataset { metadata, values };
    dataset.validate()?;
    Ok(dataset)
}

fn file_error(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File {
        path: path.display().to_string(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(file_error(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(file_error(path))
}

fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = fs::File::open(path).map_err(file_error(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let shown = path.display().to_string();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: shown.clone(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(rows.len() + 1, |p| p.line() as usize);
        let row = record
            .iter()
            .enumerate()
            .map(|(j, field)| {
                field.parse::<f64>().map_err(|_| Error::Parse {
                    path: shown.clone(),
                    line,
                    message: format!("column {}: `{field}` is not a number", j + 1),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn save_dataset(dataset: &SeriesDataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let (meta_path, values_path) = dataset_paths(path);
    let mut json = serde_json::to_string_pretty(&dataset.metadata)?;
    json.push('\n');
    write_text(&meta_path, &json)?;
    let mut text = String::new();
    for row in &dataset.values {
        let line: Vec<String> = row.iter().map(|v| format_f64(*v)).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    write_text(&values_path, &text)?;
    Ok(())
}

/// Subtracts label from control for each consecutive pair of columns.
///
/// A PLD list with one entry per raw column is reduced to one entry per
/// pair; both members of a pair must share the PLD.
pub fn asl_differenced(raw: &SeriesDataset) -> Result<SeriesDataset> {
    let tags = raw
        .metadata
        .column_tags
        .as_ref()
        .ok_or(Error::TagMismatch { pair: 0 })?;
    if tags.len() % 2 != 0 || tags.len() != raw.columns() {
        return Err(Error::TagMismatch { pair: tags.len() / 2 });
    }
    let mut order = Vec::with_capacity(tags.len() / 2);
    for (k, pair) in tags.chunks(2).enumerate() {
        match pair {
            [ColumnTag::Control, ColumnTag::Label] => order.push((2 * k, 2 * k + 1)),
            [ColumnTag::Label, ColumnTag::Control] => order.push((2 * k + 1, 2 * k)),
            _ => return Err(Error::TagMismatch { pair: k }),
        }
    }
    let values = raw
        .values
        .iter()
        .map(|row| order.iter().map(|&(c, l)| row[c] - row[l]).collect())
        .collect();
    let mut metadata = raw.metadata.clone();
    metadata.column_tags = None;
    if let Some(asl) = metadata.asl.as_mut() {
        if asl.design.plds.len() == tags.len() {
            let mut plds = Vec::with_capacity(order.len());
            for (k, &(c, l)) in order.iter().enumerate() {
                if asl.design.plds[c] != asl.design.plds[l] {
                    return Err(Error::TagMismatch { pair: k });
                }
                plds.push(asl.design.plds[c]);
            }
            asl.design.plds = plds;
        }
    }
    if let Some(times) = metadata.times.as_mut() {
        if times.len() == tags.len() {
            *times = order.iter().map(|&(c, _)| times[c]).collect();
        }
    }
    let out = SeriesDataset { metadata, values };
    out.validate()?;
    Ok(out)
}

/// Independent normal prior per latent coordinate, or a full covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sd: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
}

impl PriorConfig {
    pub fn to_spec(&self) -> Result<GaussianSpec> {
        let p = self.mean.len();
        let mean = DVector::from_vec(self.mean.clone());
        match (&self.sd, &self.covariance) {
            (Some(sd), None) => {
                if sd.len() != p {
                    return Err(Error::DimensionMismatch {
                        expected: p,
                        found: sd.len(),
                    });
                }
                GaussianSpec::from_sds(mean, sd, Structure::Full)
            }
            (None, Some(rows)) => {
                if rows.len() != p || rows.iter().any(|r| r.len() != p) {
                    return Err(Error::InvalidConfig(format!(
                        "prior covariance must be {p}×{p}"
                    )));
                }
                let c = DMatrix::from_fn(p, p, |i, j| rows[i][j]);
                GaussianSpec::from_covariance(mean, &c, Structure::Full)
            }
            _ => Err(Error::InvalidConfig(
                "prior needs exactly one of `sd` and `covariance`".into(),
            )),
        }
    }
}

/// Default prior for a model: noninformative except for the ASL transit
/// time, which is `N(1.3, 1)`.
pub fn default_prior(model: &dyn ForwardModel) -> PriorConfig {
    let p = model.signature().parameter_count() + 1;
    if model.name() == models::ASL_PCASL {
        PriorConfig {
            mean: vec![0.0, 1.3, 0.0],
            sd: Some(vec![1e3, 1.0, 1e3]),
            covariance: None,
        }
    } else {
        PriorConfig {
            mean: vec![NONINFORMATIVE_MEAN; p],
            sd: Some(vec![NONINFORMATIVE_SD; p]),
            covariance: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum InitConfig {
    Prior,
    Data,
    Custom(PriorConfig),
}

impl InitConfig {
    pub fn to_strategy(&self) -> Result<InitStrategy> {
        Ok(match self {
            InitConfig::Prior => InitStrategy::PriorMatched,
            InitConfig::Data => InitStrategy::DataDriven,
            InitConfig::Custom(q) => InitStrategy::Custom(q.to_spec()?),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub results: Option<PathBuf>,
    pub posteriors: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

/// Everything a fit needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Must match the dataset's model when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorConfig>,
    #[serde(default = "default_init")]
    pub init: InitConfig,
    /// Upper bound on every starting sd of the `data` init. `null` keeps
    /// the sds the model derives from the prior.
    #[serde(default = "default_initial_sd")]
    pub initial_sd: Option<f64>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_init() -> InitConfig {
    InitConfig::Data
}

fn default_initial_sd() -> Option<f64> {
    Some(DEFAULT_INITIAL_SD)
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: None,
            prior: None,
            init: default_init(),
            initial_sd: default_initial_sd(),
            optimizer: OptimizerConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Prior for `model`, checking the model name and dimension.
    pub fn prior_for(&self, model: &dyn ForwardModel) -> Result<GaussianSpec> {
        if let Some(name) = &self.model {
            if name != model.name() {
                return Err(Error::InvalidConfig(format!(
                    "config selects model `{name}` but the dataset uses `{}`",
                    model.name()
                )));
            }
        }
        let prior = self.prior.clone().unwrap_or_else(|| default_prior(model)).to_spec()?;
        let expected = model.signature().parameter_count() + 1;
        if prior.dim() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: prior.dim(),
            });
        }
        Ok(prior)
    }

    /// Starting posterior for `problem`, with the `data` init's sds capped
    /// at `initial_sd`.
    pub fn init_for(&self, problem: &Problem, prior: &GaussianSpec) -> Result<InitStrategy> {
        let strategy = self.init.to_strategy()?;
        match (&strategy, self.initial_sd) {
            (InitStrategy::DataDriven, Some(cap)) => {
                if !(cap > 0.0 && cap.is_finite()) {
                    return Err(Error::InvalidConfig(format!("initial_sd must be positive, got {cap}")));
                }
                let q = strategy.resolve(problem, prior, Structure::Full)?;
                let sds: Vec<f64> = q.sds().iter().map(|s| s.min(cap)).collect();
                Ok(InitStrategy::Custom(GaussianSpec::from_sds(q.mean().clone(), &sds, Structure::Full)?))
            }
            _ => Ok(strategy),
        }
    }
}

/// Result of one series as written to the posterior JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPosterior {
    pub series_id: usize,
    pub parameters: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub posterior: Option<GaussianSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_free_energy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence_epoch: Option<usize>,
    pub epochs_run: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Outcome of fitting one row of a dataset.
#[derive(Debug)]
pub struct SeriesOutcome {
    pub series_id: usize,
    pub model: Arc<dyn ForwardModel>,
    pub result: Result<FitResult>,
}

impl SeriesOutcome {
    pub fn to_posterior(&self) -> SeriesPosterior {
        let parameters = latent_names(self.model.as_ref());
        match &self.result {
            Ok(r) => SeriesPosterior {
                series_id: self.series_id,
                parameters,
                posterior: Some(r.posterior.clone()),
                best_free_energy: r.best_free_energy,
                best_epoch: r.best_epoch,
                convergence_epoch: r.convergence_epoch,
                epochs_run: r.epochs_run,
                error: None,
            },
            Err(e) => SeriesPosterior {
                series_id: self.series_id,
                parameters,
                posterior: None,
                best_free_energy: None,
                best_epoch: None,
                convergence_epoch: None,
                epochs_run: 0,
                error: Some(e.to_string()),
            },
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

/// Per-series results as CSV; failed series leave every value empty.
pub fn write_results_csv<W: Write>(outcomes: &[SeriesOutcome], out: W, timing: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let names = outcomes
        .first()
        .map(|o| latent_names(o.model.as_ref()))
        .unwrap_or_default();
    let mut header = vec!["series_id".to_string()];
    for n in &names {
        header.push(format!("{n}_mean"));
        header.push(format!("{n}_sd"));
    }
    header.extend(["best_F", "conv_epoch", "conv_time_s"].map(String::from));
    w.write_record(&header)?;
    for o in outcomes {
        let mut rec = vec![o.series_id.to_string()];
        match &o.result {
            Ok(r) => {
                let sds = r.posterior.sds();
                for (m, s) in r.posterior.mean().iter().zip(sds) {
                    rec.push(format_f64(*m));
                    rec.push(format_f64(s));
                }
                rec.push(opt(r.best_free_energy));
                rec.push(r.convergence_epoch.map(|e| e.to_string()).unwrap_or_default());
                rec.push(if timing { opt(r.wall_time_to_convergence) } else { String::new() });
            }
            Err(_) => rec.extend(std::iter::repeat_n(String::new(), 2 * names.len() + 3)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_posteriors_json<W: Write>(outcomes: &[SeriesOutcome], mut out: W) -> Result<()> {
    let all: Vec<SeriesPosterior> = outcomes.iter().map(SeriesOutcome::to_posterior).collect();
    serde_json::to_writer_pretty(&mut out, &all)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// One free-energy trace per row: the series id, then one value per epoch.
pub fn write_trace_csv<W: Write>(outcomes: &[SeriesOutcome], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    for o in outcomes {
        let mut rec = vec![o.series_id.to_string()];
        let trace = match &o.result {
            Ok(r) => &r.free_energy_trace[..],
            Err(Error::ModelEvaluationFailure { partial, .. }) => &partial.free_energy_trace[..],
            Err(_) => &[],
        };
        rec.extend(trace.iter().map(|v| format_f64(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// A labelled free-energy trace.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub label: String,
    pub values: Vec<f64>,
}

/// Reads traces written by [`write_trace_csv`]. Empty cells are skipped.
pub fn read_trace_csv(path: &Path) -> Result<Vec<Trace>> {
    let file = fs::File::open(path).map_err(file_error(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let shown = path.display().to_string();
    let mut traces = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let mut fields = record.iter();
        let label = fields.next().unwrap_or_default().to_string();
        let values = fields
            .filter(|f| !f.is_empty())
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    path: shown.clone(),
                    line,
                    message: format!("`{f}` is not a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        traces.push(Trace { label, values });
    }
    Ok(traces)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Free energy against epoch, one polyline per trace.
pub fn render_svg(traces: &[Trace]) -> String {
    let (width, height, margin) = (640.0, 400.0, 56.0);
    let finite = || traces.iter().flat_map(|t| t.values.iter().copied()).filter(|v| v.is_finite());
    let lo = finite().fold(f64::INFINITY, f64::min);
    let hi = finite().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo, hi)
    } else if lo.is_finite() {
        (lo - 1.0, lo + 1.0)
    } else {
        (0.0, 1.0)
    };
    let epochs = traces.iter().map(|t| t.values.len()).max().unwrap_or(0).max(2) - 1;
    let x = |e: usize| margin + (width - 2.0 * margin) * e as f64 / epochs as f64;
    let y = |v: f64| height - margin - (height - 2.0 * margin) * (v - lo) / (hi - lo);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = margin,
        b = height - margin,
        r = width - margin
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">epoch</text>"#,
        width / 2.0,
        height - 16.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {})">free energy</text>"#,
        height / 2.0,
        height / 2.0
    );
    for (v, anchor) in [(hi, margin), (lo, height - margin)] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{anchor}" text-anchor="end" font-size="10">{}</text>"#,
            margin - 4.0,
            format_f64((v * 1e3).round() / 1e3)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{epochs}</text>"#,
        width - margin,
        height - margin + 14.0
    );
    for (i, t) in traces.iter().enumerate() {
        let points: Vec<String> = t
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(e, v)| format!("{:.2},{:.2}", x(e), y(*v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1" points="{}"><title>{}</title></polyline>"#,
            PALETTE[i % PALETTE.len()],
            points.join(" "),
            escape(&t.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn minimal() -> SeriesDataset {
        SeriesDataset {
            metadata: DatasetMetadata {
                model: models::BIEXP.into(),
                times: Some(vec![0.0, 1.0]),
                asl: None,
                design_matrix: None,
                column_tags: None,
                units: "s".into(),
                mask: None,
            },
            values: vec![vec![1.5, 0.25]],
        }
    }

    fn tagged(plds: Vec<f64>, values: Vec<Vec<f64>>) -> SeriesDataset {
        let n = values[0].len();
        SeriesDataset {
            metadata: DatasetMetadata {
                model: models::ASL_PCASL.into(),
                times: None,
                design_matrix: None,
                asl: Some(AslMetadata {
                    design: AslDesign { plds, ..AslDesign::paper_layout() },
                    slice_index_per_voxel: None,
                }),
                column_tags: Some(
                    (0..n)
                        .map(|j| if j % 2 == 0 { ColumnTag::Control } else { ColumnTag::Label })
                        .collect(),
                ),
                units: String::new(),
                mask: None,
            },
            values,
        }
    }

    #[test]
    fn formats_round_trip() {
        for v in [0.0, -0.0, 1.0, 0.1, 1e-300, -2.5e20, std::f64::consts::PI, 123456.789, 5e-324] {
            assert_eq!(format_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits(), "{v}");
        }
        assert_eq!(format_f64(0.5), "0.5");
        assert_eq!(format_f64(1e-300), "1e-300");
    }

    #[test]
    fn paths_from_either_file() {
        let (j, c) = dataset_paths(Path::new("/x/data.json"));
        assert_eq!((j.to_str().unwrap(), c.to_str().unwrap()), ("/x/data.json", "/x/data.csv"));
        let (j, _) = dataset_paths(Path::new("/x/data.v1"));
        assert_eq!(j.to_str().unwrap(), "/x/data.v1.json");
    }

    #[test]
    fn loads_minimal_dataset() {
        let dir = tempdir().unwrap();
        fs::write(dir.path().join("d.json"), r#"{"model": "biexp", "times": [0, 1]}"#).unwrap();
        fs::write(dir.path().join("d.csv"), "3.0, 4.0\n").unwrap();
        let d = load_dataset(&dir.path().join("d.json")).unwrap();
        assert_eq!(d.rows(), 1);
        assert_eq!(d.columns(), 2);
        assert_eq!(d.values[0], vec![3.0, 4.0]);
    }

    #[test]
    fn ragged_rows_name_the_row() {
        let dir = tempdir().unwrap();
        fs::write(dir.path().join("d.json"), r#"{"model": "biexp", "times": [0, 1]}"#).unwrap();
        fs::write(dir.path().join("d.csv"), "1,2\n1,2,3\n").unwrap();
        let err = load_dataset(&dir.path().join("d")).unwrap_err();
        assert!(matches!(&err, Error::InvariantViolation(m) if m.contains("row 2")), "{err}");
    }

    #[test]
    fn bad_number_names_the_line() {
        let dir = tempdir().unwrap();
        fs::write(dir.path().join("d.json"), r#"{"model": "biexp", "times": [0, 1]}"#).unwrap();
        fs::write(dir.path().join("d.csv"), "1,2\n1,x\n").unwrap();
        let err = load_dataset(&dir.path().join("d")).unwrap_err();
        assert!(matches!(&err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn bad_metadata_is_a_parse_error() {
        let dir = tempdir().unwrap();
        fs::write(dir.path().join("d.json"), "{\n\"model\": \"biexp\",\n\"tiems\": [0]}").unwrap();
        fs::write(dir.path().join("d.csv"), "1\n").unwrap();
        let err = load_dataset(&dir.path().join("d")).unwrap_err();
        assert!(matches!(&err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn mask_length_is_checked() {
        let mut d = minimal();
        d.metadata.mask = Some(vec![true, false]);
        assert!(matches!(d.validate(), Err(Error::InvariantViolation(_))));
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let mut d = minimal();
        d.values = vec![vec![std::f64::consts::E, -1.0 / 3.0], vec![1e-17, 6.02214076e23]];
        d.metadata.mask = Some(vec![true, false]);
        save_dataset(&d, &dir.path().join("rt")).unwrap();
        let back = load_dataset(&dir.path().join("rt")).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn differencing_equal_pairs_gives_zero() {
        let raw = tagged(vec![0.5], vec![vec![2.0, 2.0, 7.0, 7.0]]);
        let d = asl_differenced(&raw).unwrap();
        assert_eq!(d.values, vec![vec![0.0, 0.0]]);
        assert!(d.metadata.column_tags.is_none());
    }

    #[test]
    fn single_pair_difference() {
        let raw = tagged(vec![0.5], vec![vec![3.0, 1.0]]);
        assert_eq!(asl_differenced(&raw).unwrap().values, vec![vec![2.0]]);
    }

    #[test]
    fn label_first_pairs_are_accepted() {
        let mut raw = tagged(vec![0.5], vec![vec![1.0, 3.0]]);
        raw.metadata.column_tags = Some(vec![ColumnTag::Label, ColumnTag::Control]);
        assert_eq!(asl_differenced(&raw).unwrap().values, vec![vec![2.0]]);
    }

    #[test]
    fn mismatched_tags_are_rejected() {
        let mut raw = tagged(vec![0.5], vec![vec![1.0, 3.0, 1.0, 3.0]]);
        raw.metadata.column_tags = Some(vec![
            ColumnTag::Control,
            ColumnTag::Label,
            ColumnTag::Control,
            ColumnTag::Control,
        ]);
        assert!(matches!(asl_differenced(&raw), Err(Error::TagMismatch { pair: 1 })));
    }

    #[test]
    fn paper_layout_differences_to_48_samples() {
        let plds = vec![0.25, 0.5, 0.75, 1.0, 1.25, 1.5];
        let raw = tagged(plds.clone(), vec![(0..96).map(|j| j as f64).collect()]);
        let d = asl_differenced(&raw).unwrap();
        assert_eq!(d.columns(), 48);
        let design = d.effective_asl_design().unwrap();
        let expected: Vec<f64> = plds.iter().flat_map(|&p| std::iter::repeat_n(p, 8)).collect();
        assert_eq!(design.plds, expected);
        assert_eq!(d.model_for_row(0).unwrap().data_len(), 48);
    }

    #[test]
    fn per_column_plds_are_paired() {
        let raw = tagged(vec![0.25, 0.25, 0.5, 0.5], vec![vec![1.0, 0.0, 2.0, 0.0]]);
        let d = asl_differenced(&raw).unwrap();
        assert_eq!(d.metadata.asl.unwrap().design.plds, vec![0.25, 0.5]);
        let bad = tagged(vec![0.25, 0.5, 0.5, 0.5], vec![vec![1.0, 0.0, 2.0, 0.0]]);
        assert!(matches!(asl_differenced(&bad), Err(Error::TagMismatch { pair: 0 })));
    }

    #[test]
    fn asl_metadata_keys() {
        let json = r#"{"model": "asl-pcasl", "asl": {"plds": [0.25], "tau": 1.8, "slice_offset": 0.0452,
            "t1": 1.3, "t1b": 1.6, "m0a": 1.0, "slice_index_per_voxel": [2]}, "units": "a.u."}"#;
        let meta: DatasetMetadata = serde_json::from_str(json).unwrap();
        let d = SeriesDataset {
            metadata: meta,
            values: vec![vec![0.01]],
        };
        d.validate().unwrap();
        let model = d.model_for_row(0).unwrap();
        assert_eq!(model.name(), models::ASL_PCASL);
        let t = crate::models::expand_asl_times(&d.effective_asl_design().unwrap(), 2);
        assert!((t[0] - 2.1404).abs() < 1e-12);
    }

    #[test]
    fn design_matrix_builds_a_linear_model() {
        let json = r#"{"model": "linear", "design_matrix": [[1, 0, 0], [1, 1, 1], [1, 2, 4]]}"#;
        let d = SeriesDataset {
            metadata: serde_json::from_str(json).unwrap(),
            values: vec![vec![1.0, 2.0, 3.0]],
        };
        d.validate().unwrap();
        let m = d.model_for_row(0).unwrap();
        assert_eq!(m.signature().parameter_count(), 3);
        let mut bad = d.clone();
        bad.metadata.model = models::BIEXP.into();
        assert!(bad.validate().is_err());
        let mut short = d.clone();
        short.metadata.design_matrix.as_mut().unwrap().pop();
        assert!(short.validate().is_err());
    }

    #[test]
    fn data_init_sds_are_capped() {
        let model = build_model(models::BIEXP, &ModelDesign::Times(DesignGrid::linspace(0.0, 1.0, 4).unwrap())).unwrap();
        let problem = Problem::new(model.clone(), vec![8.0, 5.0, 3.0, 2.0]).unwrap();
        let mut cfg = RunConfig::default();
        let prior = cfg.prior_for(model.as_ref()).unwrap();
        let InitStrategy::Custom(q) = cfg.init_for(&problem, &prior).unwrap() else {
            panic!("expected a resolved init");
        };
        assert_eq!(q.sds(), vec![DEFAULT_INITIAL_SD; 5]);
        assert_eq!(q.mean()[0], 4.0);
        cfg.initial_sd = None;
        assert_eq!(cfg.init_for(&problem, &prior).unwrap(), InitStrategy::DataDriven);
        cfg.initial_sd = Some(0.0);
        assert!(cfg.init_for(&problem, &prior).is_err());
    }

    #[test]
    fn prior_config_dimension_is_checked() {
        let model = build_model(models::BIEXP, &ModelDesign::Times(DesignGrid::linspace(0.0, 1.0, 3).unwrap())).unwrap();
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.prior_for(model.as_ref()).unwrap().dim(), 5);
        cfg.prior = Some(PriorConfig {
            mean: vec![0.0; 3],
            sd: Some(vec![1.0; 3]),
            covariance: None,
        });
        assert!(matches!(cfg.prior_for(model.as_ref()), Err(Error::DimensionMismatch { .. })));
        cfg.prior = None;
        cfg.model = Some(models::LINEAR.into());
        assert!(cfg.prior_for(model.as_ref()).is_err());
    }

    #[test]
    fn run_config_parses() {
        let json = r#"{"prior": {"mean": [0, 1.3, 0], "covariance": [[1,0,0],[0,1,0],[0,0,1]]},
            "init": {"custom": {"mean": [0, 1, 0], "sd": [1, 1, 1]}},
            "optimizer": {"learning_rate": 0.1, "seed": 3}}"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.optimizer.learning_rate, 0.1);
        assert_eq!(cfg.optimizer.sample_count, OptimizerConfig::default().sample_count);
        assert!(matches!(cfg.init.to_strategy().unwrap(), InitStrategy::Custom(_)));
        let bare: RunConfig = serde_json::from_str(r#"{"init": "prior"}"#).unwrap();
        assert_eq!(bare.init, InitConfig::Prior);
    }

    #[test]
    fn svg_has_one_polyline_per_trace() {
        let traces: Vec<Trace> = (0..3)
            .map(|i| Trace {
                label: format!("s{i}"),
                values: vec![-100.0 + i as f64, -50.0, -40.0 - i as f64],
            })
            .collect();
        let svg = render_svg(&traces);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 3);
    }

    #[test]
    fn trace_csv_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.csv");
        fs::write(&path, "0,-3,-2,-1\n1,-5,-4\n").unwrap();
        let t = read_trace_csv(&path).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[1].values, vec![-5.0, -4.0]);
    }
}
