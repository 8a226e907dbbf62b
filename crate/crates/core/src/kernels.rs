//! Kernel functions: RBF, the deep kernel (RBF over network features), and the
//! infinite-width fully-connected NNGP kernel.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::Positive;
use crate::nn::FeatureNetwork;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbfParams {
    pub lengthscale: f64,
    pub outputscale: f64,
}

impl RbfParams {
    pub fn new(lengthscale: f64, outputscale: f64) -> Result<Self> {
        if !(lengthscale > 0.0) || !(outputscale > 0.0) {
            return Err(Error::Domain(format!(
                "RBF lengthscale and outputscale must be positive, got {lengthscale} and {outputscale}"
            )));
        }
        Ok(Self {
            lengthscale,
            outputscale,
        })
    }
}

/// Trainable RBF head: both scales softplus-parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbfHead {
    pub lengthscale: Positive,
    pub outputscale: Positive,
}

impl RbfHead {
    pub fn new(lengthscale: f64, outputscale: f64) -> Result<Self> {
        Ok(Self {
            lengthscale: Positive::new(lengthscale)?,
            outputscale: Positive::new(outputscale)?,
        })
    }

    pub fn params(&self) -> RbfParams {
        RbfParams {
            lengthscale: self.lengthscale.value(),
            outputscale: self.outputscale.value(),
        }
    }
}

/// Pointwise nonlinearity used by the Monte-Carlo NNGP path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationFn {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl ActivationFn {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationFn::Relu => x.max(0.0),
            ActivationFn::Tanh => x.tanh(),
            ActivationFn::Sigmoid => crate::gp::sigmoid(x),
            ActivationFn::Identity => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NngpActivation {
    /// Closed-form arc-cosine expectation.
    Relu,
    MonteCarlo {
        function: ActivationFn,
        samples: usize,
        seed: u64,
    },
}

pub const DEFAULT_MC_SAMPLES: usize = 100_000;
const MIN_MC_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NngpParams {
    /// Number of hidden layers.
    pub depth: usize,
    pub weight_var: f64,
    pub bias_var: f64,
    pub activation: NngpActivation,
}

impl NngpParams {
    pub fn relu(depth: usize, weight_var: f64, bias_var: f64) -> Result<Self> {
        let p = Self {
            depth,
            weight_var,
            bias_var,
            activation: NngpActivation::Relu,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Domain("NNGP depth must be at least 1".into()));
        }
        if !(self.weight_var > 0.0) || !(self.bias_var > 0.0) {
            return Err(Error::Domain(format!(
                "NNGP variances must be positive, got σ_w²={} σ_b²={}",
                self.weight_var, self.bias_var
            )));
        }
        if let NngpActivation::MonteCarlo { samples, .. } = self.activation {
            if samples < MIN_MC_SAMPLES {
                return Err(Error::Domain(format!(
                    "Monte-Carlo NNGP needs at least {MIN_MC_SAMPLES} samples, got {samples}"
                )));
            }
        }
        Ok(())
    }
}

/// Which kernel a GP uses.
#[derive(Debug, Clone)]
pub enum KernelSpec {
    Rbf(RbfParams),
    Deep(FeatureNetwork, RbfParams),
    Nngp(NngpParams, Option<f64>),
}

impl KernelSpec {
    pub fn matrix(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            KernelSpec::Rbf(p) => rbf_kernel(a, b, p),
            KernelSpec::Deep(net, head) => deep_kernel(a, b, net, head),
            KernelSpec::Nngp(p, scale) => {
                Ok(nngp_kernel(a, b, p)? * scale.unwrap_or(1.0))
            }
        }
    }

    /// Prior variances `k(x, x)` for every row.
    pub fn diagonal(&self, a: &DMatrix<f64>) -> Result<DVector<f64>> {
        match self {
            KernelSpec::Rbf(p) | KernelSpec::Deep(_, p) => {
                Ok(DVector::from_element(a.nrows(), p.outputscale))
            }
            KernelSpec::Nngp(p, scale) => {
                Ok(nngp_diagonal(a, p)? * scale.unwrap_or(1.0))
            }
        }
    }
}

/// Squared Euclidean distances between rows, clamped at zero.
pub fn squared_distances(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let an: Vec<f64> = a.row_iter().map(|r| r.norm_squared()).collect();
    let bn: Vec<f64> = b.row_iter().map(|r| r.norm_squared()).collect();
    let mut d = a * b.transpose();
    for j in 0..b.nrows() {
        for i in 0..a.nrows() {
            d[(i, j)] = (an[i] + bn[j] - 2.0 * d[(i, j)]).max(0.0);
        }
    }
    d
}

/// `outputscale · exp(−‖aᵢ − bⱼ‖² / 2ℓ²)`.
pub fn rbf_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, params: &RbfParams) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "RBF between {}-dim and {}-dim rows",
            a.ncols(),
            b.ncols()
        )));
    }
    let inv = 1.0 / (2.0 * params.lengthscale * params.lengthscale);
    let mut k = squared_distances(a, b);
    k.apply(|v| *v = params.outputscale * (-*v * inv).exp());
    Ok(k)
}

/// Gradients of `Σᵢⱼ Gᵢⱼ Kᵢⱼ` for an RBF kernel matrix `K = k(A, B)`.
#[derive(Debug, Clone)]
pub struct RbfGrads {
    pub d_a: DMatrix<f64>,
    pub d_b: DMatrix<f64>,
    pub d_lengthscale: f64,
    pub d_outputscale: f64,
}

/// Reverse pass of [`rbf_kernel`]; `k` must be the forward value.
pub fn rbf_backward(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k: &DMatrix<f64>,
    g: &DMatrix<f64>,
    params: &RbfParams,
) -> RbfGrads {
    let l2 = params.lengthscale * params.lengthscale;
    let h = g.component_mul(k);
    let d_outputscale = h.sum() / params.outputscale;
    let d2 = squared_distances(a, b);
    let d_lengthscale = h.dot(&d2) / (l2 * params.lengthscale);

    let row_sums = h.column_sum();
    let col_sums = h.row_sum();
    let mut d_a = &h * b;
    for i in 0..a.nrows() {
        let s = row_sums[i];
        for c in 0..a.ncols() {
            d_a[(i, c)] = (d_a[(i, c)] - s * a[(i, c)]) / l2;
        }
    }
    let mut d_b = h.transpose() * a;
    for j in 0..b.nrows() {
        let s = col_sums[j];
        for c in 0..b.ncols() {
            d_b[(j, c)] = (d_b[(j, c)] - s * b[(j, c)]) / l2;
        }
    }
    RbfGrads {
        d_a,
        d_b,
        d_lengthscale,
        d_outputscale,
    }
}

/// RBF over network features `g_θ(A)`, `g_θ(B)`.
pub fn deep_kernel(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    network: &FeatureNetwork,
    head: &RbfParams,
) -> Result<DMatrix<f64>> {
    let fa = network.forward(a)?;
    let fb = network.forward(b)?;
    rbf_kernel(&fa, &fb, head)
}

fn check_covariance(kxx: f64, kxy: f64, kyy: f64) -> Result<f64> {
    if !(kxx > 0.0) || !(kyy > 0.0) {
        return Err(Error::Domain(format!(
            "2x2 covariance needs positive diagonal, got {kxx} and {kyy}"
        )));
    }
    let norm = (kxx * kyy).sqrt();
    if !kxy.is_finite() || kxy.abs() > norm * (1.0 + 1e-12) {
        return Err(Error::Domain(format!(
            "|kxy| = {} exceeds sqrt(kxx kyy) = {norm}",
            kxy.abs()
        )));
    }
    Ok(norm)
}

/// `E[ReLU(u)ReLU(v)]` for `(u, v) ~ N(0, [[kxx, kxy], [kxy, kyy]])`, via the
/// arc-cosine closed form.
pub fn relu_expectation(kxx: f64, kxy: f64, kyy: f64) -> Result<f64> {
    let norm = check_covariance(kxx, kxy, kyy)?;
    Ok(relu_expectation_unchecked(kxx, kxy, kyy, norm))
}

fn relu_expectation_unchecked(_kxx: f64, kxy: f64, _kyy: f64, norm: f64) -> f64 {
    // Clamp before arccos; roundoff on collinear inputs otherwise yields NaN.
    let cos = (kxy / norm).clamp(-1.0, 1.0);
    let theta = cos.acos();
    norm / (2.0 * PI) * (theta.sin() + (PI - theta) * cos)
}

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Antithetic Monte-Carlo estimate of `E[φ(u)φ(v)]`; `samples` counts draws
/// (each antithetic pair contributes two).
pub fn mc_expectation<R: Rng + ?Sized>(
    kxx: f64,
    kxy: f64,
    kyy: f64,
    activation: ActivationFn,
    samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    check_covariance(kxx, kxy, kyy)?;
    if samples < 2 {
        return Err(Error::Domain("need at least two Monte-Carlo samples".into()));
    }
    let (a, rho_x, rho_y) = cholesky_2x2(kxx, kxy, kyy);
    let pairs = samples / 2;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..pairs {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let u = a * z1;
        let v = rho_x * z1 + rho_y * z2;
        let pair = 0.5
            * (activation.apply(u) * activation.apply(v)
                + activation.apply(-u) * activation.apply(-v));
        sum += pair;
        sum_sq += pair * pair;
    }
    let n = pairs as f64;
    let mean = sum / n;
    let var = ((sum_sq / n) - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    Ok(McEstimate {
        mean,
        std_error: (var / n).sqrt(),
    })
}

/// `u = a z₁`, `v = ρₓ z₁ + ρᵧ z₂` reproduces the 2×2 covariance.
fn cholesky_2x2(kxx: f64, kxy: f64, kyy: f64) -> (f64, f64, f64) {
    let a = kxx.sqrt();
    let rho_x = kxy / a;
    let rho_y = (kyy - rho_x * rho_x).max(0.0).sqrt();
    (a, rho_x, rho_y)
}

/// Shared standard-normal pairs so every kernel entry sees the same draws;
/// keeps the Monte-Carlo kernel a deterministic function of its seed.
struct CommonDraws {
    z: Vec<(f64, f64)>,
}

impl CommonDraws {
    fn new(samples: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let z = (0..samples.div_ceil(2))
            .map(|_| (rng.sample(StandardNormal), rng.sample(StandardNormal)))
            .collect();
        Self { z }
    }

    fn expectation(&self, f: ActivationFn, kxx: f64, kxy: f64, kyy: f64) -> f64 {
        let (a, rx, ry) = cholesky_2x2(kxx, kxy, kyy);
        let mut s = 0.0;
        for &(z1, z2) in &self.z {
            let u = a * z1;
            let v = rx * z1 + ry * z2;
            s += f.apply(u) * f.apply(v) + f.apply(-u) * f.apply(-v);
        }
        s / (2 * self.z.len()) as f64
    }
}

enum Expectation {
    Relu,
    Mc(ActivationFn, CommonDraws),
}

impl Expectation {
    fn new(params: &NngpParams) -> Self {
        match params.activation {
            NngpActivation::Relu => Expectation::Relu,
            NngpActivation::MonteCarlo {
                function,
                samples,
                seed,
            } => Expectation::Mc(function, CommonDraws::new(samples, seed)),
        }
    }

    fn eval(&self, kxx: f64, kxy: f64, kyy: f64) -> f64 {
        match self {
            Expectation::Relu => {
                relu_expectation_unchecked(kxx, kxy, kyy, (kxx * kyy).sqrt())
            }
            Expectation::Mc(f, draws) => draws.expectation(*f, kxx, kxy, kyy),
        }
    }
}

/// First-layer covariance `σ_b² + σ_w² xᵀx'/d`.
pub fn nngp_first_layer(x: &[f64], y: &[f64], params: &NngpParams) -> f64 {
    let d = x.len().max(1) as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    params.bias_var + params.weight_var * dot / d
}

/// Per-layer variances `k⁽ˡ⁾(x, x)` for every row, layers `1..=depth+1`.
fn diagonal_trajectory(
    a: &DMatrix<f64>,
    params: &NngpParams,
    e: &Expectation,
) -> Vec<Vec<f64>> {
    (0..a.nrows())
        .map(|i| {
            let row: Vec<f64> = a.row(i).iter().copied().collect();
            let mut k = nngp_first_layer(&row, &row, params);
            let mut traj = Vec::with_capacity(params.depth + 1);
            traj.push(k);
            for _ in 0..params.depth {
                k = params.bias_var + params.weight_var * e.eval(k, k, k);
                traj.push(k);
            }
            traj
        })
        .collect()
}

/// NNGP kernel of a fully-connected network with `depth` hidden layers and a
/// linear readout: `depth` applications of the expectation step after the
/// first affine layer. Each pair carries its `(kxx, kxy, kyy)` triple through
/// the layers.
pub fn nngp_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, params: &NngpParams) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "NNGP between {}-dim and {}-dim rows",
            a.ncols(),
            b.ncols()
        )));
    }
    params.validate()?;
    let e = Expectation::new(params);
    let da = diagonal_trajectory(a, params, &e);
    let db = diagonal_trajectory(b, params, &e);
    let same = a == b;
    let mut k = DMatrix::zeros(a.nrows(), b.nrows());
    for j in 0..b.nrows() {
        let bj: Vec<f64> = b.row(j).iter().copied().collect();
        for i in 0..a.nrows() {
            if same && i == j {
                k[(i, j)] = da[i][params.depth];
                continue;
            }
            if same && i < j {
                k[(i, j)] = k[(j, i)];
                continue;
            }
            let ai: Vec<f64> = a.row(i).iter().copied().collect();
            let mut kxy = nngp_first_layer(&ai, &bj, params);
            for l in 0..params.depth {
                let (kxx, kyy) = (da[i][l], db[j][l]);
                let bound = (kxx * kyy).sqrt();
                kxy = kxy.clamp(-bound, bound);
                kxy = params.bias_var + params.weight_var * e.eval(kxx, kxy, kyy);
            }
            k[(i, j)] = kxy;
        }
    }
    Ok(k)
}

/// `k(x, x)` for every row of `a`.
pub fn nngp_diagonal(a: &DMatrix<f64>, params: &NngpParams) -> Result<DVector<f64>> {
    params.validate()?;
    let e = Expectation::new(params);
    let traj = diagonal_trajectory(a, params, &e);
    Ok(DVector::from_iterator(
        a.nrows(),
        traj.iter().map(|t| t[params.depth]),
    ))
}
