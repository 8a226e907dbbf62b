//! Dataset ingestion, synthetic generators, normalization and fold
//! protocols.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::gp::{Dataset, GaussianPosterior};

/// Reads a headed numeric CSV whose last `target_columns` columns are
/// targets. Reported rows and columns are 1-based positions in the file.
pub fn read_csv<R: Read>(reader: R, target_columns: usize) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let width = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            column: 0,
            message: e.to_string(),
        })?
        .len();
    if target_columns == 0 || target_columns >= width {
        return Err(Error::Config(format!(
            "{target_columns} target columns requested from a {width}-column file"
        )));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for (r, record) in rdr.records().enumerate() {
        let line = r + 2;
        let record = record.map_err(|e| Error::Parse {
            row: line,
            column: 0,
            message: e.to_string(),
        })?;
        if record.len() != width {
            return Err(Error::Parse {
                row: line,
                column: record.len() + 1,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: line,
                column: c + 1,
                message: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row: line, column: c + 1 });
            }
            values.push(v);
        }
        rows += 1;
    }
    let all = DMatrix::from_row_slice(rows, width, &values);
    let d = width - target_columns;
    Dataset::new(all.columns(0, d).clone_owned(), all.columns(d, target_columns).clone_owned())
}

pub fn load_csv(path: &Path, target_columns: usize) -> Result<Dataset> {
    read_csv(std::fs::File::open(path)?, target_columns)
}

/// Writes inputs then targets with a generated header (`x0.., y0..`).
/// Values use the shortest representation that reads back exactly.
pub fn write_csv<W: Write>(writer: W, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let (d, c) = (data.input_dim(), data.output_dim());
    let header: Vec<String> = (0..d).map(|i| format!("x{i}")).chain((0..c).map(|i| format!("y{i}"))).collect();
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..data.len() {
        let row: Vec<String> = data
            .inputs
            .row(i)
            .iter()
            .chain(data.targets.row(i).iter())
            .map(|v| format!("{v:?}"))
            .collect();
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(path: &Path, data: &Dataset) -> Result<()> {
    write_csv(std::fs::File::create(path)?, data)
}

pub const TOY_POINTS: usize = 800;
pub const TOY_NOISE_VAR: f64 = 0.05;
pub const TOY_RANGE: (f64, f64) = (-2.0, 12.0);
pub const TOY_GAP: (f64, f64) = (4.0, 8.0);

/// `0.6 − e^{−(x−2)²} − e^{−(x−6)²/10} − 1/(x²+1)`.
pub fn toy_function(x: f64) -> f64 {
    0.6 - (-(x - 2.0).powi(2)).exp() - (-(x - 6.0).powi(2) / 10.0).exp() - 1.0 / (x * x + 1.0)
}

#[derive(Debug, Clone)]
pub struct ToyData {
    /// First half with every input in the gap removed.
    pub d1: Dataset,
    /// Second half, complete.
    pub d2: Dataset,
    pub truth: fn(f64) -> f64,
}

/// 800 uniform inputs on `[−2, 12]` with noisy targets, halved; the first
/// half loses its points in `[4, 8]`.
pub fn toy_dataset<R: Rng + ?Sized>(rng: &mut R) -> ToyData {
    let noise = Normal::new(0.0, TOY_NOISE_VAR.sqrt()).expect("valid normal");
    let xs: Vec<f64> = (0..TOY_POINTS).map(|_| rng.random_range(TOY_RANGE.0..TOY_RANGE.1)).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| toy_function(x) + noise.sample(rng)).collect();
    let half = TOY_POINTS / 2;
    let keep: Vec<usize> = (0..half).filter(|&i| !(TOY_GAP.0..=TOY_GAP.1).contains(&xs[i])).collect();
    let make = |idx: &[usize]| {
        Dataset::new(
            DMatrix::from_iterator(idx.len(), 1, idx.iter().map(|&i| xs[i])),
            DMatrix::from_iterator(idx.len(), 1, idx.iter().map(|&i| ys[i])),
        )
        .expect("finite toy data")
    };
    let second: Vec<usize> = (half..TOY_POINTS).collect();
    ToyData {
        d1: make(&keep),
        d2: make(&second),
        truth: toy_function,
    }
}

pub const BLOB_RADIUS: f64 = 2.5;
pub const BLOB_STD: f64 = 1.0;

/// `n` points in 2-D from three isotropic Gaussians centred on an
/// equilateral triangle; targets are class labels `0, 1, 2`.
pub fn gaussian_blobs<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Dataset {
    let mut x = DMatrix::zeros(n, 2);
    let mut y = DMatrix::zeros(n, 1);
    for i in 0..n {
        let class = i % 3;
        let angle = 2.0 * std::f64::consts::PI * class as f64 / 3.0;
        for (j, centre) in [angle.cos(), angle.sin()].into_iter().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            x[(i, j)] = BLOB_RADIUS * centre + BLOB_STD * e;
        }
        y[(i, 0)] = class as f64;
    }
    Dataset::new(x, y).expect("finite blobs")
}

/// Reads integer class labels from a one-column target matrix.
pub fn labels_from_targets(targets: &DMatrix<f64>, num_classes: usize) -> Result<Vec<usize>> {
    (0..targets.nrows())
        .map(|i| {
            let v = targets[(i, 0)];
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < num_classes {
                Ok(v as usize)
            } else {
                Err(Error::InvalidLabel {
                    row: i,
                    label: v,
                    num_classes,
                })
            }
        })
        .collect()
}

/// Per-column affine map estimated on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
    /// Columns with zero spread, left unscaled (inputs then targets).
    pub constant_inputs: Vec<usize>,
    pub constant_targets: Vec<usize>,
}

fn column_stats(m: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let n = m.nrows() as f64;
    let mut means = Vec::new();
    let mut stds = Vec::new();
    let mut constant = Vec::new();
    for (j, col) in m.column_iter().enumerate() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd > 1e-12 * mean.abs().max(1.0) {
            means.push(mean);
            stds.push(sd);
        } else {
            means.push(0.0);
            stds.push(1.0);
            constant.push(j);
        }
    }
    (means, stds, constant)
}

fn affine(m: &DMatrix<f64>, mean: &[f64], sd: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| (m[(i, j)] - mean[j]) / sd[j])
}

impl Scaler {
    /// Statistics from `train` (population standard deviation). Targets are
    /// left untouched when `scale_targets` is false.
    pub fn fit(train: &Dataset, scale_targets: bool) -> Self {
        let (input_mean, input_std, constant_inputs) = column_stats(&train.inputs);
        let (target_mean, target_std, constant_targets) = if scale_targets {
            column_stats(&train.targets)
        } else {
            let c = train.output_dim();
            (vec![0.0; c], vec![1.0; c], Vec::new())
        };
        Self {
            input_mean,
            input_std,
            target_mean,
            target_std,
            constant_inputs,
            constant_targets,
        }
    }

    pub fn transform_inputs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        affine(x, &self.input_mean, &self.input_std)
    }

    pub fn transform(&self, data: &Dataset) -> Dataset {
        Dataset {
            inputs: self.transform_inputs(&data.inputs),
            targets: affine(&data.targets, &self.target_mean, &self.target_std),
            noise_var: data.noise_var.clone(),
        }
    }

    pub fn inverse_targets(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| y[(i, j)] * self.target_std[j] + self.target_mean[j])
    }

    /// Means back to target units, variances scaled by the squared spread.
    pub fn inverse_posterior(&self, p: &GaussianPosterior) -> GaussianPosterior {
        GaussianPosterior {
            mean: self.inverse_targets(&p.mean),
            variance: DMatrix::from_fn(p.variance.nrows(), p.variance.ncols(), |i, j| {
                p.variance[(i, j)] * self.target_std[j].powi(2)
            }),
        }
    }
}

/// Normalizes `train` and every set in `apply_to` with statistics from
/// `train` alone.
pub fn normalize(train: &Dataset, apply_to: &[&Dataset]) -> (Dataset, Vec<Dataset>, Scaler) {
    let scaler = Scaler::fit(train, true);
    let others = apply_to.iter().map(|d| scaler.transform(d)).collect();
    (scaler.transform(train), others, scaler)
}

/// Index sets of one evaluation split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled partition into `k` near-equal test folds.
pub fn kfold<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<FoldIndices>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2 (k = {k} leaves an empty test set)")));
    }
    if k > n {
        return Err(Error::Config(format!("cannot make {k} folds from {n} points")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let test: Vec<usize> = perm[start..start + len].to_vec();
        let train: Vec<usize> = perm[..start].iter().chain(&perm[start + len..]).copied().collect();
        folds.push(FoldIndices { train, test });
        start += len;
    }
    Ok(folds)
}

/// `count` independent random splits holding out `round(test_fraction·n)`
/// points each.
pub fn resplits<R: Rng + ?Sized>(n: usize, count: usize, test_fraction: f64, rng: &mut R) -> Result<Vec<FoldIndices>> {
    if count == 0 {
        return Err(Error::Config("need at least one split".into()));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test_fraction must lie in (0, 1), got {test_fraction}")));
    }
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    Ok((0..count)
        .map(|_| {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            let train = perm.split_off(n_test);
            FoldIndices { train, test: perm }
        })
        .collect())
}
