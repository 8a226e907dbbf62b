//! Dense Gaussian algebra: exact GP conditioning and the log marginal
//! likelihood, plus the reverse-mode adjoints the training objectives need.
//!
//! All solves go through a [`CholeskyFactor`]; no explicit inverse is formed
//! except where a gradient needs the full `(K + σ²I)⁻¹`.

mod cholesky;

pub use cholesky::{cholesky_with_jitter, CholeskyFactor, DEFAULT_JITTER};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Smallest latent variance a posterior will report.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Inputs `n×d`, targets `n×c`, and optional per-point, per-output noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub noise_var: Option<DMatrix<f64>>,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, targets: DMatrix<f64>) -> Result<Self> {
        Self::with_noise(inputs, targets, None)
    }

    pub fn with_noise(
        inputs: DMatrix<f64>,
        targets: DMatrix<f64>,
        noise_var: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        if inputs.nrows() != targets.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} input rows but {} target rows",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        check_finite(&inputs)?;
        check_finite(&targets)?;
        if let Some(nv) = &noise_var {
            if nv.shape() != targets.shape() {
                return Err(Error::DimensionMismatch(format!(
                    "noise variances are {:?} but targets are {:?}",
                    nv.shape(),
                    targets.shape()
                )));
            }
            check_finite(nv)?;
            if let Some(v) = nv.iter().find(|v| **v <= 0.0) {
                return Err(Error::NonPositiveVariance(*v));
            }
        }
        Ok(Self {
            inputs,
            targets,
            noise_var,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.ncols()
    }

    /// Rows `idx`, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            targets: self.targets.select_rows(idx),
            noise_var: self.noise_var.as_ref().map(|nv| nv.select_rows(idx)),
        }
    }
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(Error::NonFinite { row: i, column: j });
            }
        }
    }
    Ok(())
}

/// A strictly positive scalar stored as an unconstrained real through softplus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Positive {
    pub raw: f64,
}

impl Positive {
    pub fn new(value: f64) -> Result<Self> {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::Domain(format!("expected a positive finite value, got {value}")));
        }
        Ok(Self {
            raw: softplus_inverse(value),
        })
    }

    pub fn from_raw(raw: f64) -> Self {
        Self { raw }
    }

    pub fn value(&self) -> f64 {
        softplus(self.raw)
    }

    /// d value / d raw.
    pub fn derivative(&self) -> f64 {
        sigmoid(self.raw)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GP hyperparameters, each softplus-parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    pub noise_var: Positive,
    pub outputscale: Positive,
    pub lengthscale: Positive,
}

impl GpHyperparams {
    pub fn new(noise_var: f64, outputscale: f64, lengthscale: f64) -> Result<Self> {
        Ok(Self {
            noise_var: Positive::new(noise_var)?,
            outputscale: Positive::new(outputscale)?,
            lengthscale: Positive::new(lengthscale)?,
        })
    }
}

/// Independent per-point, per-output Gaussian marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: DMatrix<f64>,
    pub variance: DMatrix<f64>,
}

impl GaussianPosterior {
    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.nrows() == 0
    }

    /// Adds observation noise to every latent variance.
    pub fn with_noise(&self, noise_var: f64) -> GaussianPosterior {
        GaussianPosterior {
            mean: self.mean.clone(),
            variance: self.variance.add_scalar(noise_var),
        }
    }
}

/// Observation noise entering `K + diag(noise)`.
#[derive(Debug, Clone, Copy)]
pub enum Noise<'a> {
    Shared(f64),
    /// `n×c`, one variance per point and output column.
    PerPoint(&'a DMatrix<f64>),
}

impl Noise<'_> {
    fn validate(&self, n: usize, c: usize) -> Result<()> {
        match self {
            Noise::Shared(v) => {
                if !(*v >= 0.0) {
                    return Err(Error::NonPositiveVariance(*v));
                }
            }
            Noise::PerPoint(m) => {
                if m.nrows() != n || m.ncols() != c {
                    return Err(Error::DimensionMismatch(format!(
                        "per-point noise is {:?}, expected ({n}, {c})",
                        m.shape()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Factorization(s) of `K + diag(noise)`: one shared factor, or one per output
/// column under per-point noise.
struct NoisyFactors {
    factors: Vec<CholeskyFactor>,
}

impl NoisyFactors {
    fn new(k: &DMatrix<f64>, noise: Noise, outputs: usize) -> Result<Self> {
        let n = k.nrows();
        let factors = match noise {
            Noise::Shared(v) => {
                let mut a = k.clone();
                for i in 0..n {
                    a[(i, i)] += v;
                }
                vec![cholesky_with_jitter(&a, DEFAULT_JITTER)?]
            }
            Noise::PerPoint(m) => (0..outputs)
                .map(|c| {
                    let mut a = k.clone();
                    for i in 0..n {
                        a[(i, i)] += m[(i, c)];
                    }
                    cholesky_with_jitter(&a, DEFAULT_JITTER)
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(Self { factors })
    }

    fn for_output(&self, c: usize) -> &CholeskyFactor {
        if self.factors.len() == 1 {
            &self.factors[0]
        } else {
            &self.factors[c]
        }
    }
}

fn column(m: &DMatrix<f64>, c: usize) -> DMatrix<f64> {
    m.columns(c, 1).clone_owned()
}

/// Exact predictive marginals of the latent function at test points:
/// `μ* = k*ᵀ(K+σ²I)⁻¹y`, `σ*² = k** − k*ᵀ(K+σ²I)⁻¹k*`.
///
/// When `train.noise_var` is present it replaces `noise_var` with a
/// per-point diagonal.
pub fn posterior_predictive(
    train: &Dataset,
    k: &DMatrix<f64>,
    k_star: &DMatrix<f64>,
    k_starstar: &DVector<f64>,
    noise_var: f64,
) -> Result<GaussianPosterior> {
    let noise = match &train.noise_var {
        Some(m) => Noise::PerPoint(m),
        None => Noise::Shared(noise_var),
    };
    Ok(ExactConditional::new(k, k_star, k_starstar, &train.targets, noise)?.posterior)
}

/// `Σ_c log N(y_c | 0, K + σ²I)`.
pub fn log_marginal_likelihood(train: &Dataset, k: &DMatrix<f64>, noise_var: f64) -> Result<f64> {
    let noise = match &train.noise_var {
        Some(m) => Noise::PerPoint(m),
        None => Noise::Shared(noise_var),
    };
    lml_parts(k, &train.targets, noise).map(|p| p.value)
}

struct LmlParts {
    value: f64,
    factors: NoisyFactors,
    alpha: DMatrix<f64>,
}

fn lml_parts(k: &DMatrix<f64>, y: &DMatrix<f64>, noise: Noise) -> Result<LmlParts> {
    let n = k.nrows();
    if k.ncols() != n || y.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "kernel {:?} against targets {:?}",
            k.shape(),
            y.shape()
        )));
    }
    let c = y.ncols();
    noise.validate(n, c)?;
    let factors = NoisyFactors::new(k, noise, c)?;
    let mut alpha = DMatrix::zeros(n, c);
    let mut value = 0.0;
    for col in 0..c {
        let f = factors.for_output(col);
        let yc = column(y, col);
        let a = f.solve(&yc);
        value += -0.5 * yc.dot(&a) - 0.5 * f.log_det() - 0.5 * n as f64 * LN_2PI;
        alpha.set_column(col, &a.column(0));
    }
    Ok(LmlParts {
        value,
        factors,
        alpha,
    })
}

/// Log marginal likelihood with its gradient with respect to every entry of
/// `K` and to a shared noise variance.
#[derive(Debug, Clone)]
pub struct LmlGrad {
    pub value: f64,
    pub d_kernel: DMatrix<f64>,
    /// Zero under per-point noise (those variances are not trained).
    pub d_noise: f64,
}

/// `∂LML/∂A = ½(ααᵀ − A⁻¹)` summed over output columns, `A = K + diag(noise)`.
pub fn lml_with_grad(k: &DMatrix<f64>, y: &DMatrix<f64>, noise: Noise) -> Result<LmlGrad> {
    let parts = lml_parts(k, y, noise)?;
    let n = k.nrows();
    let mut d_kernel = DMatrix::zeros(n, n);
    let mut shared_inverse: Option<DMatrix<f64>> = None;
    for col in 0..y.ncols() {
        let inv = match noise {
            Noise::Shared(_) => shared_inverse
                .get_or_insert_with(|| parts.factors.for_output(0).inverse())
                .clone(),
            Noise::PerPoint(_) => parts.factors.for_output(col).inverse(),
        };
        let a = parts.alpha.column(col);
        d_kernel.ger(0.5, &a, &a, 1.0);
        d_kernel -= inv * 0.5;
    }
    let d_noise = match noise {
        Noise::Shared(_) => d_kernel.trace(),
        Noise::PerPoint(_) => 0.0,
    };
    Ok(LmlGrad {
        value: parts.value,
        d_kernel,
        d_noise,
    })
}

/// Conditioning of test points on a training block, retaining what the
/// backward pass needs.
pub struct ExactConditional {
    alpha: DMatrix<f64>,
    /// `A⁻¹ K₁₂` per factor.
    projections: Vec<DMatrix<f64>>,
    pub posterior: GaussianPosterior,
    floored: DMatrix<bool>,
    shared_noise: bool,
}

/// Adjoints of an [`ExactConditional`] with respect to its inputs.
#[derive(Debug, Clone)]
pub struct ConditionalGrads {
    pub d_k11: DMatrix<f64>,
    pub d_k12: DMatrix<f64>,
    pub d_kss: DVector<f64>,
    pub d_noise: f64,
}

impl ExactConditional {
    /// `k11`: n₁×n₁ training kernel, `k12`: n₁×n₂ cross kernel, `kss`: prior
    /// variances at the n₂ test points, `y1`: n₁×c targets.
    pub fn new(
        k11: &DMatrix<f64>,
        k12: &DMatrix<f64>,
        kss: &DVector<f64>,
        y1: &DMatrix<f64>,
        noise: Noise,
    ) -> Result<Self> {
        let n1 = k11.nrows();
        let n2 = k12.ncols();
        let c = y1.ncols();
        if k11.ncols() != n1 || k12.nrows() != n1 || y1.nrows() != n1 || kss.len() != n2 {
            return Err(Error::DimensionMismatch(format!(
                "conditioning shapes: K11 {:?}, K12 {:?}, k** {}, y {:?}",
                k11.shape(),
                k12.shape(),
                kss.len(),
                y1.shape()
            )));
        }
        noise.validate(n1, c)?;
        let shared_noise = matches!(noise, Noise::Shared(_));

        let mut mean = DMatrix::zeros(n2, c);
        let mut variance = DMatrix::zeros(n2, c);
        let mut floored = DMatrix::from_element(n2, c, false);
        if n1 == 0 {
            for col in 0..c {
                for j in 0..n2 {
                    variance[(j, col)] = kss[j].max(VARIANCE_FLOOR);
                    floored[(j, col)] = kss[j] < VARIANCE_FLOOR;
                }
            }
            return Ok(Self {
                alpha: DMatrix::zeros(0, c),
                projections: vec![],
                posterior: GaussianPosterior { mean, variance },
                floored,
                shared_noise,
            });
        }

        let factors = NoisyFactors::new(k11, noise, c)?;
        let mut alpha = DMatrix::zeros(n1, c);
        let mut projections = Vec::with_capacity(factors.factors.len());
        for f in &factors.factors {
            projections.push(f.solve(k12));
        }
        for col in 0..c {
            let f = factors.for_output(col);
            let a = f.solve(&column(y1, col));
            alpha.set_column(col, &a.column(0));
            let v = if projections.len() == 1 {
                &projections[0]
            } else {
                &projections[col]
            };
            let mu = k12.tr_mul(&a);
            for j in 0..n2 {
                mean[(j, col)] = mu[(j, 0)];
                let reduction = k12.column(j).dot(&v.column(j));
                let var = kss[j] - reduction;
                if var < VARIANCE_FLOOR {
                    variance[(j, col)] = VARIANCE_FLOOR;
                    floored[(j, col)] = true;
                } else {
                    variance[(j, col)] = var;
                }
            }
        }
        Ok(Self {
            alpha,
            projections,
            posterior: GaussianPosterior { mean, variance },
            floored,
            shared_noise,
        })
    }

    fn projection(&self, col: usize) -> &DMatrix<f64> {
        if self.projections.len() == 1 {
            &self.projections[0]
        } else {
            &self.projections[col]
        }
    }

    /// Pulls `∂L/∂μ` and `∂L/∂σ²` (both n₂×c) back onto `K₁₁`, `K₁₂`, `k**`
    /// and the shared noise variance. Floored variances pass no gradient.
    pub fn backward(&self, g_mean: &DMatrix<f64>, g_var: &DMatrix<f64>) -> ConditionalGrads {
        let n2 = self.posterior.mean.nrows();
        let c = self.posterior.mean.ncols();
        let n1 = self.alpha.nrows();
        let mut d_k11 = DMatrix::zeros(n1, n1);
        let mut d_k12 = DMatrix::zeros(n1, n2);
        let mut d_kss = DVector::zeros(n2);
        let mut d_noise = 0.0;

        for col in 0..c {
            let gv: DVector<f64> = DVector::from_fn(n2, |j, _| {
                if self.floored[(j, col)] {
                    0.0
                } else {
                    g_var[(j, col)]
                }
            });
            d_kss += &gv;
            if n1 == 0 {
                continue;
            }
            let gm = g_mean.column(col);
            let a = self.alpha.column(col);
            let v = self.projection(col);

            // μ = K₂₁ α, α = A⁻¹y
            d_k12.ger(1.0, &a, &gm, 1.0);
            let w = v * gm;
            let mut d_a = -(&w * a.transpose());

            // σ² = k** − diag(K₂₁ A⁻¹ K₁₂)
            let mut vg = v.clone();
            for (j, mut colv) in vg.column_iter_mut().enumerate() {
                colv *= gv[j];
            }
            d_k12 -= &vg * 2.0;
            d_a.gemm(1.0, &vg, &v.transpose(), 1.0);

            if self.shared_noise {
                d_noise += d_a.trace();
            }
            d_k11 += d_a;
        }
        ConditionalGrads {
            d_k11,
            d_k12,
            d_kss,
            d_noise,
        }
    }
}

/// Log density of `N(0, Σ)` at `y`, via the factor of `Σ`.
pub fn mvn_log_density(y: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let f = cholesky_with_jitter(cov, DEFAULT_JITTER)?;
    let z = f.solve_lower(&DMatrix::from_column_slice(y.len(), 1, y.as_slice()));
    Ok(-0.5 * z.norm_squared() - 0.5 * f.log_det() - 0.5 * y.len() as f64 * LN_2PI)
}
