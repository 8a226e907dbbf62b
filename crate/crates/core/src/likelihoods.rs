//! Observation models: the Gaussian regression likelihood and the
//! Dirichlet-transformed classification likelihood.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GaussianPosterior;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub const DEFAULT_ALPHA_EPS: f64 = 0.01;
pub const TRAIN_SAMPLES: usize = 256;
pub const TEST_SAMPLES: usize = 1024;

/// Lognormal approximation of a Dirichlet with concentrations `α_ε + 1[hit]`,
/// turning each class into a heteroscedastic regression target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletTransform {
    pub alpha_eps: f64,
    pub targets: DMatrix<f64>,
    pub noise_var: DMatrix<f64>,
}

/// `(ỹ, σ̃²)` for one concentration: `σ̃² = ln(1/α + 1)`, `ỹ = ln α − σ̃²/2`.
pub fn lognormal_moments(alpha: f64) -> (f64, f64) {
    let var = (1.0 / alpha).ln_1p();
    (alpha.ln() - 0.5 * var, var)
}

pub fn dirichlet_transform(labels: &[usize], num_classes: usize, alpha_eps: f64) -> Result<DirichletTransform> {
    if !(alpha_eps > 0.0) {
        return Err(Error::Domain(format!("alpha_eps must be positive, got {alpha_eps}")));
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, l)| **l >= num_classes) {
        return Err(Error::InvalidLabel {
            row,
            label: label as f64,
            num_classes,
        });
    }
    let (hit_y, hit_v) = lognormal_moments(alpha_eps + 1.0);
    let (miss_y, miss_v) = lognormal_moments(alpha_eps);
    let n = labels.len();
    let targets = DMatrix::from_fn(n, num_classes, |i, c| if labels[i] == c { hit_y } else { miss_y });
    let noise_var = DMatrix::from_fn(n, num_classes, |i, c| if labels[i] == c { hit_v } else { miss_v });
    Ok(DirichletTransform {
        alpha_eps,
        targets,
        noise_var,
    })
}

/// Monte-Carlo class probabilities: softmax of latent draws, averaged.
pub fn predictive_class_probs<R: Rng + ?Sized>(
    latent: &GaussianPosterior,
    samples: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if samples == 0 {
        return Err(Error::Domain("need at least one sample".into()));
    }
    if latent.mean.shape() != latent.variance.shape() {
        return Err(Error::DimensionMismatch(format!(
            "mean {:?} vs variance {:?}",
            latent.mean.shape(),
            latent.variance.shape()
        )));
    }
    let (n, c) = latent.mean.shape();
    let mut probs = DMatrix::zeros(n, c);
    let mut draw = vec![0.0; c];
    for i in 0..n {
        let sd: Vec<f64> = (0..c).map(|k| latent.variance[(i, k)].max(0.0).sqrt()).collect();
        for _ in 0..samples {
            let mut top = f64::NEG_INFINITY;
            for k in 0..c {
                let z: f64 = rng.sample(StandardNormal);
                draw[k] = latent.mean[(i, k)] + sd[k] * z;
                top = top.max(draw[k]);
            }
            let mut total = 0.0;
            for d in draw.iter_mut() {
                *d = (*d - top).exp();
                total += *d;
            }
            for k in 0..c {
                probs[(i, k)] += draw[k] / total;
            }
        }
        let row_sum: f64 = (0..c).map(|k| probs[(i, k)]).sum();
        for k in 0..c {
            probs[(i, k)] /= row_sum;
        }
    }
    Ok(probs)
}

/// `log N(y | mean, var_latent + noise_var)`.
pub fn gaussian_marginal_ll(mean: f64, var_latent: f64, noise_var: f64, y: f64) -> f64 {
    let var = var_latent + noise_var;
    -0.5 * (LN_2PI + var.ln() + (y - mean).powi(2) / var)
}
