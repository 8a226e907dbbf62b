//! Regression and classification metrics.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GaussianPosterior;
use crate::likelihoods::gaussian_marginal_ll;

fn same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    Ok(())
}

fn check_labels(probs: &DMatrix<f64>, labels: &[usize]) -> Result<()> {
    if probs.nrows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} probability rows for {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    if let Some((row, &l)) = labels.iter().enumerate().find(|(_, l)| **l >= probs.ncols()) {
        return Err(Error::InvalidLabel {
            row,
            label: l as f64,
            num_classes: probs.ncols(),
        });
    }
    Ok(())
}

/// Root mean squared error over every entry.
pub fn rmse(pred: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<f64> {
    same_shape(pred, targets)?;
    Ok(((pred - targets).norm_squared() / pred.len() as f64).sqrt())
}

/// Mean over points of `log N(y | μ, σ²)` summed over output columns, where
/// `predictive` already includes the observation noise.
pub fn test_ll(predictive: &GaussianPosterior, targets: &DMatrix<f64>) -> Result<f64> {
    same_shape(&predictive.mean, targets)?;
    let mut total = 0.0;
    for ((m, v), y) in predictive.mean.iter().zip(predictive.variance.iter()).zip(targets.iter()) {
        total += gaussian_marginal_ll(*m, *v, 0.0, *y);
    }
    Ok(total / targets.nrows() as f64)
}

fn argmax(row: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub fn accuracy(probs: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, l)| argmax(probs.row(*i).iter().copied()) == **l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean log predicted probability of the true class.
pub fn class_log_likelihood(probs: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let total: f64 = labels.iter().enumerate().map(|(i, &l)| probs[(i, l)].ln()).sum();
    Ok(total / labels.len() as f64)
}

/// Mean over points of `Σ_c (p_c − 1[c = label])² / C`.
pub fn brier(probs: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let c = probs.ncols() as f64;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            probs
                .row(i)
                .iter()
                .enumerate()
                .map(|(k, p)| (p - if k == l { 1.0 } else { 0.0 }).powi(2))
                .sum::<f64>()
                / c
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// One equal-width confidence bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRecord {
    pub lower: f64,
    pub upper: f64,
    /// Mean confidence of the points in the bin (0 when empty).
    pub confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub ece: f64,
    pub mce: f64,
    pub bins: Vec<BinRecord>,
}

pub const DEFAULT_BINS: usize = 15;

/// Expected and maximum calibration error over `bins` equal-width bins of
/// the top-class confidence. Bins are right-closed; confidence 0 falls in
/// the first.
pub fn ece_mce(probs: &DMatrix<f64>, labels: &[usize], bins: usize) -> Result<Calibration> {
    check_labels(probs, labels)?;
    if bins == 0 {
        return Err(Error::Config("need at least one calibration bin".into()));
    }
    let mut conf_sum = vec![0.0; bins];
    let mut hit_sum = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (i, &l) in labels.iter().enumerate() {
        let pred = argmax(probs.row(i).iter().copied());
        let conf = probs[(i, pred)].clamp(0.0, 1.0);
        let b = ((conf * bins as f64).ceil() as usize).saturating_sub(1).min(bins - 1);
        conf_sum[b] += conf;
        hit_sum[b] += f64::from(u8::from(pred == l));
        count[b] += 1;
    }
    let n = labels.len() as f64;
    let (mut ece, mut mce) = (0.0f64, 0.0f64);
    let mut records = Vec::with_capacity(bins);
    for b in 0..bins {
        let (confidence, accuracy) = if count[b] > 0 {
            (conf_sum[b] / count[b] as f64, hit_sum[b] / count[b] as f64)
        } else {
            (0.0, 0.0)
        };
        if count[b] > 0 {
            let gap = (accuracy - confidence).abs();
            ece += count[b] as f64 / n * gap;
            mce = mce.max(gap);
        }
        records.push(BinRecord {
            lower: b as f64 / bins as f64,
            upper: (b + 1) as f64 / bins as f64,
            confidence,
            accuracy,
            count: count[b],
        });
    }
    Ok(Calibration {
        ece,
        mce,
        bins: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_hand_cases() {
        let p = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let t = DMatrix::from_column_slice(2, 1, &[2.0, 4.0]);
        assert!((rmse(&p, &t).unwrap() - 1.581139).abs() < 1e-6);
        let z = DMatrix::zeros(2, 1);
        let pm = DMatrix::from_column_slice(2, 1, &[-1.0, 1.0]);
        assert_eq!(rmse(&z, &pm).unwrap(), 1.0);
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn calibration_hand_cases() {
        let probs = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.9, 0.1]);
        let c = ece_mce(&probs, &[0, 1], 15).unwrap();
        assert!((c.ece - 0.4).abs() < 1e-12);
        assert!((c.mce - 0.4).abs() < 1e-12);
        assert_eq!(c.bins.iter().filter(|b| b.count > 0).count(), 1);

        let sure = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let c = ece_mce(&sure, &[0, 1], 15).unwrap();
        assert_eq!((c.ece, c.mce), (0.0, 0.0));
        assert_eq!(accuracy(&sure, &[0, 1]).unwrap(), 1.0);
    }

    #[test]
    fn brier_hand_cases() {
        let uniform = DMatrix::from_element(1, 2, 0.5);
        assert!((brier(&uniform, &[0]).unwrap() - 0.25).abs() < 1e-15);
        let wrong = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        assert_eq!(brier(&wrong, &[0]).unwrap(), 1.0);
        let right = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert_eq!(brier(&right, &[0]).unwrap(), 0.0);
    }
}
