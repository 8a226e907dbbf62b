//! Experiment protocol: configuration, per-fold training and evaluation,
//! and the JSON metrics report.

pub mod data;
pub mod metrics;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{Dataset, GaussianPosterior};
use crate::likelihoods::{dirichlet_transform, predictive_class_probs, DEFAULT_ALPHA_EPS, TEST_SAMPLES};
use crate::sparse::{train_sparse_gdkl, SparseGdklModel};
use crate::train::{
    stream_rng, train_dkl, train_gdkl, train_gp_rbf, train_nngp, DklModel, FrozenNngp, GdklModel, Objective,
    Predictive, RbfGp, TrainConfig,
};

pub use data::{
    gaussian_blobs, kfold, labels_from_targets, load_csv, normalize, read_csv, resplits, save_csv, toy_dataset,
    toy_function, write_csv, FoldIndices, Scaler, ToyData,
};
pub use metrics::{accuracy, brier, class_log_likelihood, ece_mce, rmse, test_ll, BinRecord, Calibration};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const BUILTIN_TOY: &str = "builtin:toy";
pub const BUILTIN_BLOBS: &str = "builtin:blobs";
pub const BLOB_POINTS: usize = 300;

const STREAM_FOLDS: u64 = 10;
const STREAM_DATA: u64 = 11;
const STREAM_SAMPLES: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "GP-RBF")]
    GpRbf,
    #[serde(rename = "NNGP")]
    Nngp,
    #[serde(rename = "DKL")]
    Dkl,
    #[serde(rename = "GDKL")]
    Gdkl,
    #[serde(rename = "GDKL-sparse")]
    GdklSparse,
    #[serde(rename = "ablation:dist")]
    AblationDist,
    #[serde(rename = "ablation:pred")]
    AblationPred,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::GpRbf,
        Method::Nngp,
        Method::Dkl,
        Method::Gdkl,
        Method::GdklSparse,
        Method::AblationDist,
        Method::AblationPred,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::GpRbf => "GP-RBF",
            Method::Nngp => "NNGP",
            Method::Dkl => "DKL",
            Method::Gdkl => "GDKL",
            Method::GdklSparse => "GDKL-sparse",
            Method::AblationDist => "ablation:dist",
            Method::AblationPred => "ablation:pred",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Self::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method {s:?}; expected one of {known:?}"))
            })
    }

    fn objective(self) -> Objective {
        match self {
            Method::AblationDist => Objective::Dist,
            Method::AblationPred => Objective::Pred,
            _ => Objective::Gdkl,
        }
    }

    /// Training schedule used for this method unless overridden.
    pub fn default_train_config(self) -> TrainConfig {
        let base = TrainConfig {
            objective: self.objective(),
            ..TrainConfig::default()
        };
        match self {
            Method::GpRbf => TrainConfig {
                total_steps: 8000,
                pretrain_steps: 0,
                ..base
            },
            Method::Dkl => TrainConfig {
                total_steps: 8000,
                pretrain_steps: 0,
                weight_decay: 1e-4,
                ..base
            },
            Method::Nngp => TrainConfig {
                total_steps: 0,
                ..base
            },
            _ => base,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Disjoint shuffled test folds.
    Kfold,
    /// Independent random hold-out splits.
    Resplit,
}

pub const REGRESSION_METRICS: [&str; 2] = ["test_ll", "rmse"];
pub const CLASSIFICATION_METRICS: [&str; 5] = ["accuracy", "test_ll", "ece", "mce", "brier"];
pub const TOY_METRICS: [&str; 2] = ["std_at_2", "std_at_6"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// CSV path, `builtin:toy` or `builtin:blobs`.
    pub dataset: String,
    pub task: Task,
    /// Trailing CSV columns holding targets (regression).
    pub target_columns: usize,
    pub num_classes: usize,
    pub alpha_eps: f64,
    pub method: Method,
    pub folds: usize,
    pub split_mode: SplitMode,
    /// Hold-out fraction in resplit mode.
    pub test_fraction: f64,
    pub seeds: Vec<u64>,
    /// Empty means every metric applicable to the task.
    pub metrics: Vec<String>,
    pub output: Option<String>,
    pub calibration_bins: usize,
    pub test_samples: usize,
    pub batch_size: usize,
    pub inducing_points: usize,
    /// Timing makes reports differ between runs, so it is opt-in.
    pub record_wall_clock: bool,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            dataset: BUILTIN_TOY.into(),
            task: Task::Regression,
            target_columns: 1,
            num_classes: 2,
            alpha_eps: DEFAULT_ALPHA_EPS,
            method,
            folds: 10,
            split_mode: SplitMode::Kfold,
            test_fraction: 0.1,
            seeds: vec![0],
            metrics: Vec::new(),
            output: None,
            calibration_bins: metrics::DEFAULT_BINS,
            test_samples: TEST_SAMPLES,
            batch_size: 256,
            inducing_points: 50,
            record_wall_clock: false,
            train: method.default_train_config(),
        }
    }

    /// Parses TOML, applies `key=value` overrides (bare field names or
    /// `train.<field>`), and fills unspecified fields with the defaults of
    /// the selected method.
    pub fn from_toml_str(s: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut user: toml::Table = s.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let top_keys: Vec<String> = {
            let mut k: Vec<String> = to_table(&Self::for_method(Method::Gdkl))?.keys().cloned().collect();
            k.push("output".into());
            k
        };
        let train_keys: Vec<String> = to_table(&TrainConfig::default())?.keys().cloned().collect();
        for (key, value) in overrides {
            apply_override(&mut user, key, value, &top_keys, &train_keys)?;
        }
        let method = match user.get("method") {
            None => Method::Gdkl,
            Some(toml::Value::String(s)) => Method::parse(s)?,
            Some(other) => return Err(Error::Config(format!("method must be a string, got {other}"))),
        };
        let mut merged = to_table(&Self::for_method(method))?;
        merge(&mut merged, user);
        let mut config: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.train.objective = method.objective();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn metric_names(&self) -> Vec<String> {
        if !self.metrics.is_empty() {
            return self.metrics.clone();
        }
        let mut names: Vec<String> = match self.task {
            Task::Regression => REGRESSION_METRICS.iter().map(|s| s.to_string()).collect(),
            Task::Classification => CLASSIFICATION_METRICS.iter().map(|s| s.to_string()).collect(),
        };
        if self.dataset == BUILTIN_TOY {
            names.extend(TOY_METRICS.iter().map(|s| s.to_string()));
        }
        names
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.train.validate()?;
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.folds == 0 {
            return bad("folds must be at least 1".into());
        }
        if self.split_mode == SplitMode::Kfold && self.folds < 2 && self.dataset != BUILTIN_TOY {
            return bad("k-fold with k = 1 leaves an empty test set".into());
        }
        let classification = self.task == Task::Classification;
        if classification && self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.dataset == BUILTIN_TOY && classification {
            return bad("builtin:toy is a regression dataset".into());
        }
        if self.dataset == BUILTIN_BLOBS && (!classification || self.num_classes != 3) {
            return bad("builtin:blobs is a 3-class classification dataset".into());
        }
        if !(self.alpha_eps > 0.0) {
            return bad(format!("alpha_eps must be positive, got {}", self.alpha_eps));
        }
        if self.calibration_bins == 0 || self.test_samples == 0 {
            return bad("calibration_bins and test_samples must be positive".into());
        }
        if self.method == Method::GdklSparse && (self.batch_size < 2 || self.inducing_points == 0) {
            return bad("GDKL-sparse needs batch_size >= 2 and inducing_points >= 1".into());
        }
        let allowed: Vec<&str> = match self.task {
            Task::Regression => REGRESSION_METRICS.iter().chain(TOY_METRICS.iter()).copied().collect(),
            Task::Classification => CLASSIFICATION_METRICS.to_vec(),
        };
        if let Some(m) = self.metrics.iter().find(|m| !allowed.contains(&m.as_str())) {
            return bad(format!("unknown metric {m:?} for this task; expected one of {allowed:?}"));
        }
        Ok(())
    }
}

fn to_table<T: Serialize>(v: &T) -> Result<toml::Table> {
    toml::Table::try_from(v).map_err(|e| Error::Config(e.to_string()))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(
    table: &mut toml::Table,
    key: &str,
    value: &str,
    top_keys: &[String],
    train_keys: &[String],
) -> Result<()> {
    let v = parse_override_value(value);
    let field = key.strip_prefix("train.");
    let in_train = match field {
        Some(f) if train_keys.iter().any(|k| k == f) => Some(f),
        Some(_) => return Err(Error::Config(format!("unknown override {key:?}"))),
        None if top_keys.iter().any(|k| k == key) => None,
        None if train_keys.iter().any(|k| k == key) => Some(key),
        None => return Err(Error::Config(format!("unknown override {key:?}"))),
    };
    match in_train {
        Some(f) => {
            let train = table
                .entry("train")
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match train {
                toml::Value::Table(t) => {
                    t.insert(f.to_string(), v);
                }
                _ => return Err(Error::Config("train must be a table".into())),
            }
        }
        None => {
            table.insert(key.to_string(), v);
        }
    }
    Ok(())
}

/// A trained model of any supported method.
#[derive(Debug, Clone)]
pub enum FittedModel {
    GpRbf(RbfGp),
    Nngp(FrozenNngp, Dataset),
    Dkl(DklModel),
    Gdkl(GdklModel),
    Sparse(SparseGdklModel),
}

impl FittedModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Predictive> {
        match self {
            FittedModel::GpRbf(m) => m.predict(x),
            FittedModel::Nngp(m, train) => m.predict(train, x),
            FittedModel::Dkl(m) => m.predict(x),
            FittedModel::Gdkl(m) => m.predict(x),
            FittedModel::Sparse(m) => m.predict(x),
        }
    }
}

/// Trains `config.method` on an already normalized training set.
pub fn fit_method(config: &ExperimentConfig, train: &Dataset) -> Result<FittedModel> {
    let tc = &config.train;
    Ok(match config.method {
        Method::GpRbf => FittedModel::GpRbf(train_gp_rbf(tc, train)?),
        Method::Nngp => FittedModel::Nngp(train_nngp(tc, train)?, train.clone()),
        Method::Dkl => FittedModel::Dkl(train_dkl(tc, train)?),
        Method::Gdkl | Method::AblationDist | Method::AblationPred => FittedModel::Gdkl(train_gdkl(tc, train)?),
        Method::GdklSparse => {
            FittedModel::Sparse(train_sparse_gdkl(tc, train, config.batch_size, config.inducing_points)?)
        }
    })
}

/// Per-fold results; `error` is set and `metrics` empty when the fold failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub seed: u64,
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub metrics: BTreeMap<String, f64>,
    pub calibration: Option<Vec<BinRecord>>,
    pub error: Option<String>,
    pub wall_clock_seconds: Option<f64>,
}

/// Mean and population standard deviation over successful folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub folds: Vec<FoldRecord>,
    pub aggregate: BTreeMap<String, Aggregate>,
    pub failed_folds: usize,
    pub wall_clock_seconds: Option<f64>,
}

pub fn aggregate(folds: &[FoldRecord]) -> BTreeMap<String, Aggregate> {
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for f in folds.iter().filter(|f| f.error.is_none()) {
        for (k, v) in &f.metrics {
            values.entry(k.clone()).or_default().push(*v);
        }
    }
    values
        .into_iter()
        .map(|(k, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            (k, Aggregate { mean, std, count: v.len() })
        })
        .collect()
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-fold training seed derived from the experiment seed.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64)
}

/// One evaluation unit: a training set and a test set in original units.
struct Task1 {
    fold: usize,
    train: Dataset,
    test: Dataset,
}

fn build_folds(config: &ExperimentConfig, seed: u64, csv: Option<&Dataset>) -> Result<Vec<Task1>> {
    let mut data_rng = stream_rng(seed, STREAM_DATA);
    let data = match config.dataset.as_str() {
        BUILTIN_TOY => {
            let toy = toy_dataset(&mut data_rng);
            return Ok(vec![Task1 {
                fold: 0,
                train: toy.d1,
                test: toy.d2,
            }]);
        }
        BUILTIN_BLOBS => gaussian_blobs(BLOB_POINTS, &mut data_rng),
        _ => csv.expect("csv loaded").clone(),
    };
    let mut rng = stream_rng(seed, STREAM_FOLDS);
    let folds = match config.split_mode {
        SplitMode::Kfold => kfold(data.len(), config.folds, &mut rng)?,
        SplitMode::Resplit => resplits(data.len(), config.folds, config.test_fraction, &mut rng)?,
    };
    Ok(folds
        .into_iter()
        .enumerate()
        .map(|(fold, f)| Task1 {
            fold,
            train: data.subset(&f.train),
            test: data.subset(&f.test),
        })
        .collect())
}

/// Metrics of one fold, in original target units.
fn evaluate_fold(config: &ExperimentConfig, seed: u64, unit: &Task1) -> Result<(BTreeMap<String, f64>, Option<Vec<BinRecord>>)> {
    let mut cfg = config.clone();
    cfg.train.seed = fold_seed(seed, unit.fold);
    let mut out = BTreeMap::new();
    match config.task {
        Task::Regression => {
            let (train, test, scaler) = {
                let (t, rest, s) = normalize(&unit.train, &[&unit.test]);
                (t, rest.into_iter().next().expect("one test set"), s)
            };
            let model = fit_method(&cfg, &train)?;
            let pred = model.predict(&test.inputs)?;
            let marginal = scaler.inverse_posterior(&pred.marginal);
            out.insert("test_ll".into(), test_ll(&marginal, &unit.test.targets)?);
            out.insert("rmse".into(), rmse(&marginal.mean, &unit.test.targets)?);
            if config.dataset == BUILTIN_TOY {
                let probe = scaler.transform_inputs(&DMatrix::from_column_slice(2, 1, &[2.0, 6.0]));
                let latent = scaler.inverse_posterior(&model.predict(&probe)?.latent);
                out.insert("std_at_2".into(), latent.variance[(0, 0)].sqrt());
                out.insert("std_at_6".into(), latent.variance[(1, 0)].sqrt());
            }
            Ok((out, None))
        }
        Task::Classification => {
            let scaler = Scaler::fit(&unit.train, false);
            let train_labels = labels_from_targets(&unit.train.targets, config.num_classes)?;
            let test_labels = labels_from_targets(&unit.test.targets, config.num_classes)?;
            let (train, offsets) = dirichlet_dataset(
                &scaler.transform_inputs(&unit.train.inputs),
                &train_labels,
                config.num_classes,
                config.alpha_eps,
            )?;
            let model = fit_method(&cfg, &train)?;
            let pred = model.predict(&scaler.transform_inputs(&unit.test.inputs))?;
            let latent = shift_columns(&pred.latent, &offsets);
            let mut rng = stream_rng(cfg.train.seed, STREAM_SAMPLES);
            let probs = predictive_class_probs(&latent, config.test_samples, &mut rng)?;
            let cal = ece_mce(&probs, &test_labels, config.calibration_bins)?;
            out.insert("accuracy".into(), accuracy(&probs, &test_labels)?);
            out.insert("test_ll".into(), class_log_likelihood(&probs, &test_labels)?);
            out.insert("ece".into(), cal.ece);
            out.insert("mce".into(), cal.mce);
            out.insert("brier".into(), brier(&probs, &test_labels)?);
            Ok((out, Some(cal.bins)))
        }
    }
}

/// Dirichlet-transformed regression problem with each class's targets
/// centred on their training mean; the means are returned so predictions
/// can be shifted back.
pub fn dirichlet_dataset(
    inputs: &DMatrix<f64>,
    labels: &[usize],
    num_classes: usize,
    alpha_eps: f64,
) -> Result<(Dataset, DVector<f64>)> {
    let t = dirichlet_transform(labels, num_classes, alpha_eps)?;
    let offsets = DVector::from_iterator(num_classes, t.targets.column_iter().map(|c| c.mean()));
    let centred = DMatrix::from_fn(t.targets.nrows(), num_classes, |i, c| t.targets[(i, c)] - offsets[c]);
    Ok((Dataset::with_noise(inputs.clone(), centred, Some(t.noise_var))?, offsets))
}

pub fn shift_columns(p: &GaussianPosterior, offsets: &DVector<f64>) -> GaussianPosterior {
    GaussianPosterior {
        mean: DMatrix::from_fn(p.mean.nrows(), p.mean.ncols(), |i, c| p.mean[(i, c)] + offsets[c]),
        variance: p.variance.clone(),
    }
}

/// Runs every seed × fold, aggregates, and writes the report to
/// `config.output` when set.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsReport> {
    config.validate()?;
    let started = Instant::now();
    let csv = match config.dataset.as_str() {
        BUILTIN_TOY | BUILTIN_BLOBS => None,
        path => {
            let columns = match config.task {
                Task::Regression => config.target_columns,
                Task::Classification => 1,
            };
            Some(load_csv(Path::new(path), columns)?)
        }
    };
    let keep = config.metric_names();
    let mut seeds = config.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    let mut folds = Vec::new();
    for &seed in &seeds {
        for unit in build_folds(config, seed, csv.as_ref())? {
            let t0 = Instant::now();
            let result = evaluate_fold(config, seed, &unit);
            let wall = config.record_wall_clock.then(|| t0.elapsed().as_secs_f64());
            let record = match result {
                Ok((mut metrics, calibration)) => {
                    metrics.retain(|k, _| keep.contains(k));
                    FoldRecord {
                        seed,
                        fold: unit.fold,
                        train_size: unit.train.len(),
                        test_size: unit.test.len(),
                        metrics,
                        calibration,
                        error: None,
                        wall_clock_seconds: wall,
                    }
                }
                Err(e) => {
                    log::warn!("seed {seed} fold {}: {e}", unit.fold);
                    FoldRecord {
                        seed,
                        fold: unit.fold,
                        train_size: unit.train.len(),
                        test_size: unit.test.len(),
                        metrics: BTreeMap::new(),
                        calibration: None,
                        error: Some(e.to_string()),
                        wall_clock_seconds: wall,
                    }
                }
            };
            log::info!("seed {seed} fold {}: {:?}", unit.fold, record.metrics);
            folds.push(record);
        }
    }
    let report = MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: config.clone(),
        aggregate: aggregate(&folds),
        failed_folds: folds.iter().filter(|f| f.error.is_some()).count(),
        folds,
        wall_clock_seconds: config.record_wall_clock.then(|| started.elapsed().as_secs_f64()),
    };
    if let Some(path) = &config.output {
        std::fs::write(path, report.to_json()?)?;
    }
    Ok(report)
}

/// Variance of `p(f* | x*, y*, D)` given the predictive latent variance
/// `v` of `p(f* | x*, D)` and observation noise `σ²`.
pub fn label_conditioned_variance(v: f64, noise_var: f64) -> f64 {
    1.0 / (1.0 / v + 1.0 / noise_var)
}

/// GP-RBF fit on the toy D1, evaluated on a grid, in original units.
#[derive(Debug, Clone)]
pub struct ToyCurves {
    pub data: ToyData,
    pub grid: Vec<f64>,
    pub latent: GaussianPosterior,
    pub noise_var: f64,
}

pub fn toy_curves(train: &TrainConfig, seed: u64, grid_points: usize) -> Result<ToyCurves> {
    if grid_points < 2 {
        return Err(Error::Config("need at least two grid points".into()));
    }
    let data = toy_dataset(&mut stream_rng(seed, STREAM_DATA));
    let (d1, _, scaler) = normalize(&data.d1, &[]);
    let gp = train_gp_rbf(train, &d1)?;
    let (lo, hi) = data::TOY_RANGE;
    let grid: Vec<f64> = (0..grid_points)
        .map(|i| lo + (hi - lo) * i as f64 / (grid_points - 1) as f64)
        .collect();
    let x = scaler.transform_inputs(&DMatrix::from_column_slice(grid_points, 1, &grid));
    let latent = scaler.inverse_posterior(&gp.predict(&x)?.latent);
    Ok(ToyCurves {
        data,
        grid,
        latent,
        noise_var: gp.noise.value() * scaler.target_std[0].powi(2),
    })
}

impl ToyCurves {
    /// `x,truth,mean,std,lower,upper` with a two-standard-deviation band on
    /// the noisy predictive.
    pub fn write_fit_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["x", "truth", "mean", "std", "lower", "upper"]).map_err(io)?;
        for (i, &x) in self.grid.iter().enumerate() {
            let m = self.latent.mean[(i, 0)];
            let sd = self.latent.variance[(i, 0)].sqrt();
            let band = 2.0 * (self.latent.variance[(i, 0)] + self.noise_var).sqrt();
            let row = [x, (self.data.truth)(x), m, sd, m - band, m + band];
            w.write_record(row.iter().map(|v| format!("{v:?}"))).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `x,y,set` for both halves of the toy data.
    pub fn write_data_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["x", "y", "set"]).map_err(io)?;
        for (name, d) in [("d1", &self.data.d1), ("d2", &self.data.d2)] {
            for i in 0..d.len() {
                w.write_record([format!("{:?}", d.inputs[(i, 0)]), format!("{:?}", d.targets[(i, 0)]), name.into()])
                    .map_err(io)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_method_is_config_error() {
        let e = ExperimentConfig::from_toml_str("method = \"SVM\"", &[]).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn method_defaults_and_overrides() {
        let c = ExperimentConfig::from_toml_str("method = \"DKL\"\n[train]\nbeta = 2.0\n", &[]).unwrap();
        assert_eq!(c.train.total_steps, 8000);
        assert_eq!(c.train.weight_decay, 1e-4);
        assert_eq!(c.train.beta, 2.0);
        let c = ExperimentConfig::from_toml_str(
            "method = \"ablation:pred\"",
            &[("beta".into(), "1.2".into()), ("folds".into(), "5".into()), ("train.seed".into(), "9".into())],
        )
        .unwrap();
        assert_eq!(c.train.beta, 1.2);
        assert_eq!(c.folds, 5);
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.train.objective, Objective::Pred);
        assert!(ExperimentConfig::from_toml_str("", &[("nonsense".into(), "1".into())]).is_err());
        assert!(ExperimentConfig::from_toml_str("typo_field = 1", &[]).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = ExperimentConfig::for_method(Method::GdklSparse);
        let s = c.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&s, &[]).unwrap(), c);
    }

    #[test]
    fn aggregate_skips_failed_folds() {
        let rec = |v: Option<f64>| FoldRecord {
            seed: 0,
            fold: 0,
            train_size: 1,
            test_size: 1,
            metrics: v.map(|v| BTreeMap::from([("rmse".to_string(), v)])).unwrap_or_default(),
            calibration: None,
            error: v.is_none().then(|| "boom".to_string()),
            wall_clock_seconds: None,
        };
        let a = aggregate(&[rec(Some(1.0)), rec(Some(3.0)), rec(None)]);
        assert_eq!(a["rmse"], Aggregate { mean: 2.0, std: 1.0, count: 2 });
    }
}
