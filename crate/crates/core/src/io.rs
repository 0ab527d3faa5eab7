//! CSV ingestion, experiment splits, and JSON persistence of fits and configs.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::driver::{FitResult, SplitSpec};
use crate::error::{Error, Result};
use crate::graph::{import_graph_json, TaskGraph};
use crate::hypergrad::HyperParams;
use crate::inner::{common_dim, TaskData};
use crate::synth::{Structure, SynthSpec};

pub const FIT_SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `path` is a directory; every `*.csv` in it is one task, ordered by file name.
    PerTaskFiles,
    /// `path` is one file; `task_column` names the task of each row.
    SingleFileWithTaskColumn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskCsv {
    pub path: PathBuf,
    pub layout: Layout,
    #[serde(default)]
    pub task_column: Option<String>,
    pub target_column: String,
    /// All remaining columns when absent.
    #[serde(default)]
    pub feature_columns: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub tasks: Vec<TaskData>,
}

pub fn load_dataset(spec: &MultiTaskCsv) -> Result<Vec<TaskData>> {
    Ok(load_named_dataset(spec)?.tasks)
}

pub fn load_named_dataset(spec: &MultiTaskCsv) -> Result<Dataset> {
    match spec.layout {
        Layout::PerTaskFiles => load_per_task(spec),
        Layout::SingleFileWithTaskColumn => load_single(spec),
    }
}

struct Columns {
    features: Vec<(usize, String)>,
    target: usize,
    task: Option<usize>,
}

fn resolve_columns(
    path: &Path,
    header: &csv::StringRecord,
    spec: &MultiTaskCsv,
) -> Result<Columns> {
    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column '{name}'", path.display())))
    };
    let target = find(&spec.target_column)?;
    let task = match (&spec.layout, &spec.task_column) {
        (Layout::SingleFileWithTaskColumn, Some(c)) => Some(find(c)?),
        (Layout::SingleFileWithTaskColumn, None) => {
            return Err(Error::Schema(
                "single-file layout needs an explicit task_column".into(),
            ))
        }
        _ => None,
    };
    let features = match &spec.feature_columns {
        Some(names) => names
            .iter()
            .map(|n| Ok((find(n)?, n.clone())))
            .collect::<Result<Vec<_>>>()?,
        None => header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != target && Some(*i) != task)
            .map(|(i, h)| (i, h.to_string()))
            .collect(),
    };
    if features.is_empty() {
        return Err(Error::Schema(format!(
            "{}: no feature columns",
            path.display()
        )));
    }
    Ok(Columns {
        features,
        target,
        task,
    })
}

fn parse_cell(path: &Path, row: usize, column: &str, cell: Option<&str>) -> Result<f64> {
    let err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    };
    let cell = cell.ok_or_else(|| err("missing cell".into()))?.trim();
    let v: f64 = cell
        .parse()
        .map_err(|_| err(format!("'{cell}' is not a number")))?;
    if !v.is_finite() {
        return Err(err(format!("non-finite value '{cell}'")));
    }
    Ok(v)
}

/// Rows of (features, target) grouped by task key, in first-appearance order.
type Grouped = Vec<(String, Vec<f64>, Vec<f64>)>;

fn read_rows(path: &Path, spec: &MultiTaskCsv) -> Result<(Vec<String>, Grouped)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Schema(format!("{}: {other:?}", path.display())),
        })?;
    let header = rdr.headers()?.clone();
    let cols = resolve_columns(path, &header, spec)?;
    let names: Vec<String> = cols.features.iter().map(|(_, n)| n.clone()).collect();
    let mut groups: Grouped = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        // 1-based data row, header excluded
        let row = r + 1;
        let key = match cols.task {
            Some(c) => record.get(c).unwrap_or("").trim().to_string(),
            None => String::new(),
        };
        let g = match groups.iter().position(|(k, _, _)| *k == key) {
            Some(g) => g,
            None => {
                groups.push((key, Vec::new(), Vec::new()));
                groups.len() - 1
            }
        };
        for (c, name) in &cols.features {
            let v = parse_cell(path, row, name, record.get(*c))?;
            groups[g].1.push(v);
        }
        let y = parse_cell(path, row, &spec.target_column, record.get(cols.target))?;
        groups[g].2.push(y);
    }
    Ok((names, groups))
}

fn to_task(d: usize, xs: Vec<f64>, ys: Vec<f64>) -> Result<TaskData> {
    let n = ys.len();
    TaskData::new(DMatrix::from_row_slice(n, d, &xs), DVector::from_vec(ys))
}

fn load_single(spec: &MultiTaskCsv) -> Result<Dataset> {
    let (names, groups) = read_rows(&spec.path, spec)?;
    if groups.is_empty() {
        return Err(Error::Schema(format!(
            "{}: no data rows",
            spec.path.display()
        )));
    }
    let d = names.len();
    let mut task_names = Vec::with_capacity(groups.len());
    let mut tasks = Vec::with_capacity(groups.len());
    for (key, xs, ys) in groups {
        task_names.push(key);
        tasks.push(to_task(d, xs, ys)?);
    }
    Ok(Dataset {
        task_names,
        feature_names: names,
        tasks,
    })
}

fn load_per_task(spec: &MultiTaskCsv) -> Result<Dataset> {
    let entries = fs::read_dir(&spec.path).map_err(|e| Error::io(&spec.path, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Schema(format!(
            "{}: no .csv files found",
            spec.path.display()
        )));
    }
    let mut feature_names: Option<Vec<String>> = None;
    let mut task_names = Vec::with_capacity(files.len());
    let mut tasks = Vec::with_capacity(files.len());
    for file in &files {
        let (names, mut groups) = read_rows(file, spec)?;
        match &feature_names {
            None => feature_names = Some(names.clone()),
            Some(first) if *first != names => {
                return Err(Error::Schema(format!(
                    "{}: feature columns {names:?} differ from {first:?}",
                    file.display()
                )))
            }
            _ => {}
        }
        let (_, xs, ys) = groups
            .pop()
            .ok_or_else(|| Error::Schema(format!("{}: no data rows", file.display())))?;
        task_names.push(
            file.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        tasks.push(to_task(names.len(), xs, ys)?);
    }
    Ok(Dataset {
        task_names,
        feature_names: feature_names.unwrap_or_default(),
        tasks,
    })
}

/// Writes `task_000.csv`, `task_001.csv`, ... with columns `x0..x{d-1},y`.
pub fn save_tasks_csv(dir: &Path, tasks: &[TaskData]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let width = tasks.len().saturating_sub(1).to_string().len().max(3);
    tasks
        .iter()
        .enumerate()
        .map(|(t, task)| {
            let path = dir.join(format!("task_{t:0width$}.csv"));
            let mut w = csv::Writer::from_path(&path)?;
            let mut header: Vec<String> = (0..task.n_features()).map(|c| format!("x{c}")).collect();
            header.push("y".into());
            w.write_record(&header)?;
            for r in 0..task.n_samples() {
                let mut row: Vec<String> = task.x.row(r).iter().map(|v| v.to_string()).collect();
                row.push(task.y[r].to_string());
                w.write_record(&row)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

/// Spec for re-reading files written by [`save_tasks_csv`].
pub fn synthetic_csv_spec(dir: &Path) -> MultiTaskCsv {
    MultiTaskCsv {
        path: dir.to_path_buf(),
        layout: Layout::PerTaskFiles,
        task_column: None,
        target_column: "y".into(),
        feature_columns: None,
    }
}

/// Per-task train/test split with `⌈rN⌉` training rows (clamped so both
/// sides are non-empty). Chronological splits keep the leading rows for
/// training; otherwise rows are permuted under `seed`.
pub fn ratio_split(
    data: &[TaskData],
    r: f64,
    seed: u64,
    chronological: bool,
) -> Result<(Vec<TaskData>, Vec<TaskData>)> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train ratio must lie in (0, 1), got {r}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(data.len());
    let mut test = Vec::with_capacity(data.len());
    for (i, t) in data.iter().enumerate() {
        let n = t.n_samples();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "task {i} has {n} rows; a train/test split needs at least 2"
            )));
        }
        let n_train = ((r * n as f64).ceil() as usize).clamp(1, n - 1);
        let mut idx: Vec<usize> = (0..n).collect();
        if !chronological {
            idx.shuffle(&mut rng);
        }
        let (a, b) = idx.split_at(n_train);
        train.push(t.select_rows(a));
        test.push(t.select_rows(b));
    }
    Ok((train, test))
}

/// Per-feature affine scaling pooled over the rows it was fitted on.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
}

impl Standardizer {
    pub fn fit(data: &[TaskData]) -> Result<Self> {
        let d = common_dim(data)?;
        let n: usize = data.iter().map(|t| t.n_samples()).sum();
        let mut mean = DVector::zeros(d);
        for t in data {
            for r in t.x.row_iter() {
                mean += r.transpose();
            }
        }
        mean /= n as f64;
        let mut var = DVector::zeros(d);
        for t in data {
            for r in t.x.row_iter() {
                let c = r.transpose() - &mean;
                var += c.component_mul(&c);
            }
        }
        var /= n as f64;
        // constant columns are left unscaled
        let std = var.map(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, data: &[TaskData]) -> Result<Vec<TaskData>> {
        data.iter()
            .map(|t| {
                if t.n_features() != self.mean.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "{} features, standardizer fitted on {}",
                        t.n_features(),
                        self.mean.len()
                    )));
                }
                let x = DMatrix::from_fn(t.n_samples(), t.n_features(), |r, c| {
                    (t.x[(r, c)] - self.mean[c]) / self.std[c]
                });
                TaskData::new(x, t.y.clone())
            })
            .collect()
    }
}

/// Fits the scaling on `train` and applies it to both sides.
pub fn standardize(
    train: &[TaskData],
    test: &[TaskData],
) -> Result<(Vec<TaskData>, Vec<TaskData>)> {
    let s = Standardizer::fit(train)?;
    Ok((s.apply(train)?, s.apply(test)?))
}

#[derive(Serialize)]
struct FitFileOut<'a> {
    schema_version: u64,
    #[serde(flatten)]
    fit: &'a FitResult,
}

pub fn fit_to_json(fit: &FitResult) -> Result<String> {
    Ok(serde_json::to_string_pretty(&FitFileOut {
        schema_version: FIT_SCHEMA_VERSION,
        fit,
    })?)
}

pub fn fit_from_json(text: &str) -> Result<FitResult> {
    let mut value: serde_json::Value = serde_json::from_str(text)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Schema("fit file must hold a JSON object".into()))?;
    match obj.remove("schema_version").and_then(|v| v.as_u64()) {
        Some(FIT_SCHEMA_VERSION) => {}
        Some(v) => {
            return Err(Error::Schema(format!(
                "fit file has schema version {v}, expected {FIT_SCHEMA_VERSION}"
            )))
        }
        None => {
            return Err(Error::Schema(format!(
                "fit file lacks schema_version (expected {FIT_SCHEMA_VERSION})"
            )))
        }
    }
    serde_json::from_value(value).map_err(|e| {
        Error::Schema(format!(
            "fit file (schema version {FIT_SCHEMA_VERSION}): {e}"
        ))
    })
}

pub fn save_fit(fit: &FitResult, path: &Path) -> Result<()> {
    fs::write(path, fit_to_json(fit)?).map_err(|e| Error::io(path, e))
}

pub fn load_fit(path: &Path) -> Result<FitResult> {
    fit_from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn load_graph(path: &Path) -> Result<TaskGraph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(import_graph_json(&text)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Csv(MultiTaskCsv),
    /// Regenerated for every repeat with seed `seed + repeat`.
    Synthetic {
        structure: Structure,
        #[serde(default)]
        n_tasks: Option<usize>,
        #[serde(default)]
        d: Option<usize>,
        #[serde(default)]
        samples_per_task: Option<usize>,
        #[serde(default)]
        noise_std: Option<f64>,
    },
}

impl DatasetSpec {
    pub fn synth_spec(&self, seed: u64) -> Option<SynthSpec> {
        match self {
            DatasetSpec::Synthetic {
                structure,
                n_tasks,
                d,
                samples_per_task,
                noise_std,
            } => {
                let base = SynthSpec::defaults(*structure, seed);
                Some(SynthSpec {
                    n_tasks: n_tasks.unwrap_or(base.n_tasks),
                    d: d.unwrap_or(base.d),
                    samples_per_task: samples_per_task.unwrap_or(base.samples_per_task),
                    noise_std: noise_std.unwrap_or(base.noise_std),
                    ..base
                })
            }
            DatasetSpec::Csv(_) => None,
        }
    }
}

fn default_train_ratio() -> f64 {
    0.5
}

fn default_repeats() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub hyper_params: HyperParams,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default = "default_train_ratio")]
    pub train_ratio: f64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub chronological: bool,
    /// Defaults to on for CSV data and off for synthetic data.
    #[serde(default)]
    pub standardize: Option<bool>,
    /// Reference graph (JSON) for veracity scores on CSV data.
    #[serde(default)]
    pub truth_graph: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "train_ratio must lie in (0, 1), got {}",
                self.train_ratio
            )));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidArgument("repeats must be at least 1".into()));
        }
        self.hyper_params.validate()
    }

    pub fn standardize_enabled(&self) -> bool {
        self.standardize
            .unwrap_or(matches!(self.dataset, DatasetSpec::Csv(_)))
    }

    /// Parses and validates a config; relative paths are resolved against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("config: {e}")))?;
        if let DatasetSpec::Csv(csv) = &mut cfg.dataset {
            if csv.path.is_relative() {
                csv.path = base.join(&csv.path);
            }
        }
        if let Some(p) = &mut cfg.truth_graph {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_json(&text, path.parent().unwrap_or(Path::new(".")))
}
