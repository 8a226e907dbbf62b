//! GDKL training: the guided objective and its ablations, NNGP
//! hyperparameter pre-training, the training loop, exact prediction, and the
//! marginal-likelihood baselines (DKL, GP-RBF, NNGP).

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gp::{
    lml_with_grad, Dataset, ExactConditional, GaussianPosterior, Noise, Positive,
};
use crate::kernels::{nngp_diagonal, nngp_kernel, rbf_backward, rbf_kernel, NngpParams, RbfHead};
use crate::nn::{FeatureNetwork, DEFAULT_HIDDEN};
use crate::objectives::{ell_with_grad, kl_with_grad, pred_nll_with_grad};
use crate::optim::{OptimizerKind, OptimizerState};

/// Random-stream ids derived from one seed.
pub(crate) const STREAM_INIT: u64 = 0;
pub(crate) const STREAM_SPLITS: u64 = 1;

/// Independent ChaCha stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Expected log-likelihood plus β-weighted KL to the NNGP posterior.
    Gdkl,
    /// KL to the NNGP posterior only.
    Dist,
    /// Marginal predictive log-likelihood only.
    Pred,
}

/// How the observation noise is shared between the deep-kernel side and the
/// NNGP side of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseWiring {
    /// The deep kernel learns its own noise; the NNGP keeps its pre-trained one.
    Separate,
    /// Both sides use the pre-trained NNGP noise, which stays frozen.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub total_steps: usize,
    pub pretrain_steps: usize,
    pub split_fraction: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Fractions of `total_steps` at which the learning rate drops by 10×.
    pub milestones: Vec<f64>,
    /// Applied to the network weights only.
    pub weight_decay: f64,
    pub noise_init: f64,
    pub lengthscale_init: f64,
    pub outputscale_init: f64,
    pub weight_var: f64,
    pub bias_var: f64,
    /// Widths after the input layer; the last entry is the feature dimension.
    pub hidden: Vec<usize>,
    pub objective: Objective,
    pub noise_wiring: NoiseWiring,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            total_steps: 7000,
            pretrain_steps: 1000,
            split_fraction: 0.5,
            seed: 0,
            optimizer: OptimizerKind::adam(),
            learning_rate: 1e-2,
            milestones: vec![0.6, 0.8],
            weight_decay: 0.0,
            noise_init: 0.02,
            lengthscale_init: 1.0,
            outputscale_init: 1.0,
            weight_var: 1.6,
            bias_var: 0.2,
            hidden: DEFAULT_HIDDEN.to_vec(),
            objective: Objective::Gdkl,
            noise_wiring: NoiseWiring::Separate,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta >= 0.0) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad(format!("split_fraction must lie in (0, 1), got {}", self.split_fraction));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, v) in [
            ("noise_init", self.noise_init),
            ("lengthscale_init", self.lengthscale_init),
            ("outputscale_init", self.outputscale_init),
            ("weight_var", self.weight_var),
            ("bias_var", self.bias_var),
        ] {
            if !(v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("hidden widths must be positive, got {:?}", self.hidden));
        }
        Ok(())
    }

    /// NNGP matching the feature network: one kernel layer per ReLU layer.
    pub fn nngp_params(&self) -> Result<NngpParams> {
        NngpParams::relu(self.hidden.len().saturating_sub(1).max(1), self.weight_var, self.bias_var)
    }
}

/// Shuffled disjoint cover of `0..n`; the first part has
/// `round(fraction·n)` entries, clamped so both parts are nonempty.
pub fn split_indices<R: Rng + ?Sized>(n: usize, fraction: f64, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Domain(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let n1 = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let second = perm.split_off(n1);
    Ok((perm, second))
}

#[derive(Debug, Clone)]
pub struct Split {
    pub d1: Dataset,
    pub d2: Dataset,
    pub idx1: Vec<usize>,
    pub idx2: Vec<usize>,
}

pub fn split_dataset<R: Rng + ?Sized>(data: &Dataset, fraction: f64, rng: &mut R) -> Result<Split> {
    let (idx1, idx2) = split_indices(data.len(), fraction, rng)?;
    Ok(Split {
        d1: data.subset(&idx1),
        d2: data.subset(&idx2),
        idx1,
        idx2,
    })
}

/// Latent posterior together with the noisy predictive marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictive {
    pub latent: GaussianPosterior,
    pub marginal: GaussianPosterior,
}

/// Feature network, RBF head and Gaussian observation noise.
#[derive(Debug, Clone)]
pub struct DeepKernel {
    pub network: FeatureNetwork,
    pub head: RbfHead,
    pub noise: Positive,
}

impl DeepKernel {
    pub fn init<R: Rng + ?Sized>(input_dim: usize, config: &TrainConfig, rng: &mut R) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(&config.hidden);
        Ok(Self {
            network: FeatureNetwork::init(&sizes, rng)?,
            head: RbfHead::new(config.lengthscale_init, config.outputscale_init)?,
            noise: Positive::new(config.noise_init)?,
        })
    }

    /// Network parameters followed by the raw lengthscale, outputscale and
    /// noise.
    pub fn num_parameters(&self) -> usize {
        self.network.num_params() + 3
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut p = self.network.params().to_vec();
        p.extend([self.head.lengthscale.raw, self.head.outputscale.raw, self.noise.raw]);
        p
    }

    pub fn set_parameters(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_parameters() {
            return Err(Error::LengthMismatch {
                expected: self.num_parameters(),
                got: p.len(),
            });
        }
        let k = self.network.num_params();
        self.network.params_mut().copy_from_slice(&p[..k]);
        self.head.lengthscale.raw = p[k];
        self.head.outputscale.raw = p[k + 1];
        self.noise.raw = p[k + 2];
        Ok(())
    }

    pub fn features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.network.forward(x)
    }

    /// Exact posterior conditioned on all of `train`, with `noise_var` as the
    /// observation noise wherever `train` carries no per-point noise.
    pub fn predict_with_noise(&self, train: &Dataset, x_test: &DMatrix<f64>, noise_var: f64) -> Result<Predictive> {
        let ft = self.features(&train.inputs)?;
        let fs = self.features(x_test)?;
        exact_rbf_predict(&ft, &fs, train, &self.head, noise_var)
    }

    pub fn predict(&self, train: &Dataset, x_test: &DMatrix<f64>) -> Result<Predictive> {
        self.predict_with_noise(train, x_test, self.noise.value())
    }

    /// Pulls `G = ∂L/∂K` (over the recorded rows) back through the RBF head
    /// and the network; returns the full gradient with the noise entry set
    /// to `d_noise`.
    fn backward(
        &mut self,
        f: &DMatrix<f64>,
        k: &DMatrix<f64>,
        g: &DMatrix<f64>,
        d_outputscale_extra: f64,
        d_noise: f64,
    ) -> Result<Vec<f64>> {
        let params = self.head.params();
        let rg = rbf_backward(f, f, k, g, &params);
        let d_f = rg.d_a + rg.d_b;
        self.network.zero_grad();
        let mut grad = self.network.backward(&d_f)?.to_vec();
        grad.push(rg.d_lengthscale * self.head.lengthscale.derivative());
        grad.push((rg.d_outputscale + d_outputscale_extra) * self.head.outputscale.derivative());
        grad.push(d_noise * self.noise.derivative());
        Ok(grad)
    }
}

fn exact_rbf_predict(
    f_train: &DMatrix<f64>,
    f_test: &DMatrix<f64>,
    train: &Dataset,
    head: &RbfHead,
    noise_var: f64,
) -> Result<Predictive> {
    let p = head.params();
    let k = rbf_kernel(f_train, f_train, &p)?;
    let ks = rbf_kernel(f_train, f_test, &p)?;
    let kss = DVector::from_element(f_test.nrows(), p.outputscale);
    let latent = crate::gp::posterior_predictive(train, &k, &ks, &kss, noise_var)?;
    let marginal = latent.with_noise(noise_var);
    Ok(Predictive { latent, marginal })
}

/// The NNGP kernel over the training inputs at unit outputscale, with its
/// pre-trained outputscale and noise. Never updated by the deep-kernel loop.
#[derive(Debug, Clone)]
pub struct FrozenNngp {
    pub params: NngpParams,
    pub raw: DMatrix<f64>,
    pub outputscale: f64,
    pub noise_var: f64,
}

impl FrozenNngp {
    /// Evaluates the kernel on `train` and fits its two scalars.
    pub fn fit(params: NngpParams, train: &Dataset, steps: usize, outputscale_init: f64, noise_init: f64) -> Result<Self> {
        let raw = nngp_kernel(&train.inputs, &train.inputs, &params)?;
        let fit = pretrain_nngp(&raw, &train.targets, train.noise_var.as_ref(), steps, outputscale_init, noise_init)?;
        Ok(Self {
            params,
            raw,
            outputscale: fit.outputscale,
            noise_var: fit.noise_var,
        })
    }

    fn noise_block<'a>(&self, train: &'a Dataset, idx: &[usize], buf: &'a mut Option<DMatrix<f64>>) -> Noise<'a> {
        match &train.noise_var {
            Some(m) => {
                *buf = Some(m.select_rows(idx));
                Noise::PerPoint(buf.as_ref().unwrap())
            }
            None => Noise::Shared(self.noise_var),
        }
    }

    /// `p(f(x_j) | D1)` for every `j ∈ idx2`, from sub-blocks of the frozen
    /// matrix.
    pub fn conditional(&self, train: &Dataset, idx1: &[usize], idx2: &[usize]) -> Result<GaussianPosterior> {
        let s = self.outputscale;
        let rows = self.raw.select_rows(idx1);
        let k11 = rows.select_columns(idx1) * s;
        let k12 = rows.select_columns(idx2) * s;
        let kss = DVector::from_iterator(idx2.len(), idx2.iter().map(|&j| self.raw[(j, j)] * s));
        let y1 = train.targets.select_rows(idx1);
        let mut buf = None;
        let noise = self.noise_block(train, idx1, &mut buf);
        Ok(ExactConditional::new(&k11, &k12, &kss, &y1, noise)?.posterior)
    }

    /// NNGP regression on all of `train`.
    pub fn predict(&self, train: &Dataset, x_test: &DMatrix<f64>) -> Result<Predictive> {
        let s = self.outputscale;
        let ks = nngp_kernel(&train.inputs, x_test, &self.params)? * s;
        let kss = nngp_diagonal(x_test, &self.params)? * s;
        let k = &self.raw * s;
        let latent = crate::gp::posterior_predictive(train, &k, &ks, &kss, self.noise_var)?;
        let marginal = latent.with_noise(self.noise_var);
        Ok(Predictive { latent, marginal })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainResult {
    pub outputscale: f64,
    pub noise_var: f64,
    /// Log marginal likelihood after each step.
    pub lml_trace: Vec<f64>,
}

/// Maximizes the log marginal likelihood of `s·K_raw + σ²I` over the softplus
/// parameters of `s` and `σ²`. With per-point noise only `s` is fitted.
///
/// Each step moves the raw parameters along the normalized gradient and is
/// kept only if the likelihood does not drop; the step length grows after an
/// accepted move and halves after a rejected one.
pub fn pretrain_nngp(
    k_raw: &DMatrix<f64>,
    y: &DMatrix<f64>,
    per_point_noise: Option<&DMatrix<f64>>,
    steps: usize,
    outputscale_init: f64,
    noise_init: f64,
) -> Result<PretrainResult> {
    let n = k_raw.nrows();
    if k_raw.ncols() != n || y.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "NNGP kernel {:?} against targets {:?}",
            k_raw.shape(),
            y.shape()
        )));
    }
    let mut scale = Positive::new(outputscale_init)?;
    let mut noise = Positive::new(noise_init)?;
    let mut lml_trace = Vec::with_capacity(steps);
    if steps == 0 {
        return Ok(PretrainResult {
            outputscale: scale.value(),
            noise_var: noise.value(),
            lml_trace,
        });
    }

    // (value, ∂/∂s, ∂/∂σ²) at given (s, σ²)
    let eval: Box<dyn Fn(f64, f64) -> Result<(f64, f64, f64)>> = match per_point_noise {
        None => {
            let eig = SymmetricEigen::new(k_raw.clone());
            let lambda: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0)).collect();
            let rotated = eig.eigenvectors.tr_mul(y);
            let c = y.ncols() as f64;
            let r: Vec<f64> = (0..n).map(|i| rotated.row(i).norm_squared()).collect();
            let constant = -0.5 * n as f64 * c * crate::gp::LN_2PI;
            Box::new(move |s, v| {
                let mut value = constant;
                let (mut ds, mut dv) = (0.0, 0.0);
                for i in 0..n {
                    let d = s * lambda[i] + v;
                    value -= 0.5 * (r[i] / d + c * d.ln());
                    let t = 0.5 * (r[i] / (d * d) - c / d);
                    ds += lambda[i] * t;
                    dv += t;
                }
                Ok((value, ds, dv))
            })
        }
        Some(m) => {
            let m = m.clone();
            Box::new(move |s, _| {
                let lg = lml_with_grad(&(k_raw * s), y, Noise::PerPoint(&m))?;
                Ok((lg.value, lg.d_kernel.dot(k_raw), 0.0))
            })
        }
    };
    let learn_noise = per_point_noise.is_none();

    let (mut current, mut ds, mut dv) = eval(scale.value(), noise.value())?;
    let mut step_len = 0.1;
    for _ in 0..steps {
        let gs = ds * scale.derivative();
        let gv = if learn_noise { dv * noise.derivative() } else { 0.0 };
        let norm = (gs * gs + gv * gv).sqrt();
        if norm > 0.0 && step_len > 1e-12 {
            let cand_s = Positive::from_raw(scale.raw + step_len * gs / norm);
            let cand_v = Positive::from_raw(noise.raw + step_len * gv / norm);
            match eval(cand_s.value(), cand_v.value()) {
                Ok((value, nds, ndv)) if value.is_finite() && value >= current => {
                    scale = cand_s;
                    noise = cand_v;
                    current = value;
                    ds = nds;
                    dv = ndv;
                    step_len = (step_len * 1.2).min(1.0);
                }
                Ok(_) => step_len *= 0.5,
                Err(e) if e.is_numerical() => step_len *= 0.5,
                Err(e) => return Err(e),
            }
        }
        lml_trace.push(current);
    }
    Ok(PretrainResult {
        outputscale: scale.value(),
        noise_var: noise.value(),
        lml_trace,
    })
}

/// A deep kernel trained against a frozen NNGP on a fixed training set.
#[derive(Debug, Clone)]
pub struct GdklModel {
    pub kernel: DeepKernel,
    pub nngp: FrozenNngp,
    pub train: Dataset,
    pub noise_wiring: NoiseWiring,
    pub loss_history: Vec<f64>,
}

impl GdklModel {
    /// Initial deep kernel plus pre-trained NNGP; no deep-kernel steps taken.
    pub fn init(config: &TrainConfig, train: Dataset) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, STREAM_INIT);
        let kernel = DeepKernel::init(train.input_dim(), config, &mut rng)?;
        let nngp = FrozenNngp::fit(
            config.nngp_params()?,
            &train,
            config.pretrain_steps,
            config.outputscale_init,
            config.noise_init,
        )?;
        Ok(Self {
            kernel,
            nngp,
            train,
            noise_wiring: config.noise_wiring,
            loss_history: Vec::new(),
        })
    }

    /// Observation noise used by the deep-kernel side.
    pub fn effective_noise(&self) -> f64 {
        match self.noise_wiring {
            NoiseWiring::Separate => self.kernel.noise.value(),
            NoiseWiring::Shared => self.nngp.noise_var,
        }
    }

    pub fn predict(&self, x_test: &DMatrix<f64>) -> Result<Predictive> {
        self.kernel.predict_with_noise(&self.train, x_test, self.effective_noise())
    }
}

/// A loss value, its parts, and its gradient in
/// [`DeepKernel::parameters`] layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    /// Mean over held-out points of the summed expected NLL (or predictive
    /// NLL for the predictive objective).
    pub data_term: f64,
    /// Mean over held-out points of the class-averaged KL.
    pub kl_term: f64,
    pub grad: Vec<f64>,
}

/// Any of the three objectives on the split `(idx1, idx2)` of the model's
/// training set: `idx1` is conditioned on, `idx2` is scored.
pub fn objective_loss(
    model: &mut GdklModel,
    objective: Objective,
    idx1: &[usize],
    idx2: &[usize],
    beta: f64,
) -> Result<LossEval> {
    let (n1, n2) = (idx1.len(), idx2.len());
    if n1 == 0 || n2 == 0 {
        return Err(Error::TooFewPoints { needed: 1, got: n1.min(n2) });
    }
    let c = model.train.output_dim();
    let all: Vec<usize> = idx1.iter().chain(idx2).copied().collect();
    let x = model.train.inputs.select_rows(&all);
    let f = model.kernel.network.forward_recorded(&x)?;
    let head = model.kernel.head.params();
    let k = rbf_kernel(&f, &f, &head)?;
    let k11 = k.view((0, 0), (n1, n1)).clone_owned();
    let k12 = k.view((0, n1), (n1, n2)).clone_owned();
    let kss = DVector::from_element(n2, head.outputscale);
    let y1 = model.train.targets.select_rows(idx1);
    let y2 = model.train.targets.select_rows(idx2);

    let learned = model.noise_wiring == NoiseWiring::Separate && model.train.noise_var.is_none();
    let shared_noise = model.effective_noise();
    let pp1 = model.train.noise_var.as_ref().map(|m| m.select_rows(idx1));
    let pp2 = model.train.noise_var.as_ref().map(|m| m.select_rows(idx2));
    let q_noise = match &pp1 {
        Some(m) => Noise::PerPoint(m),
        None => Noise::Shared(shared_noise),
    };
    let q = ExactConditional::new(&k11, &k12, &kss, &y1, q_noise)?;
    let p = match objective {
        Objective::Pred => None,
        _ => Some(model.nngp.conditional(&model.train, idx1, idx2)?),
    };

    let mut g_mean = DMatrix::zeros(n2, c);
    let mut g_var = DMatrix::zeros(n2, c);
    let (mut data_term, mut kl_term, mut d_noise) = (0.0, 0.0, 0.0);
    let w = 1.0 / n2 as f64;
    let kl_w = 1.0 / c as f64;
    for col in 0..c {
        for j in 0..n2 {
            let mq = q.posterior.mean[(j, col)];
            let vq = q.posterior.variance[(j, col)];
            let y = y2[(j, col)];
            let noise = pp2.as_ref().map_or(shared_noise, |m| m[(j, col)]);
            let data = match objective {
                Objective::Gdkl => Some(ell_with_grad(mq, vq, y, noise)),
                Objective::Pred => Some(pred_nll_with_grad(mq, vq, y, noise)),
                Objective::Dist => None,
            };
            if let Some(t) = data {
                data_term += w * t.value;
                g_mean[(j, col)] += w * t.d_mean;
                g_var[(j, col)] += w * t.d_var;
                d_noise += w * t.d_noise;
            }
            if let Some(p) = &p {
                let kl_weight = match objective {
                    Objective::Gdkl => beta,
                    _ => 1.0,
                };
                let t = kl_with_grad(mq, vq, p.mean[(j, col)], p.variance[(j, col)]);
                kl_term += w * kl_w * t.value;
                g_mean[(j, col)] += w * kl_w * kl_weight * t.d_mean;
                g_var[(j, col)] += w * kl_w * kl_weight * t.d_var;
            }
        }
    }
    let value = match objective {
        Objective::Gdkl => data_term + beta * kl_term,
        Objective::Dist => kl_term,
        Objective::Pred => data_term,
    };

    let cg = q.backward(&g_mean, &g_var);
    let n = n1 + n2;
    let mut g = DMatrix::zeros(n, n);
    g.view_mut((0, 0), (n1, n1)).copy_from(&cg.d_k11);
    g.view_mut((0, n1), (n1, n2)).copy_from(&cg.d_k12);
    let d_noise_total = if learned { d_noise + cg.d_noise } else { 0.0 };
    let grad = model.kernel.backward(&f, &k, &g, cg.d_kss.sum(), d_noise_total)?;
    Ok(LossEval {
        value,
        data_term,
        kl_term,
        grad,
    })
}

pub fn gdkl_loss(model: &mut GdklModel, idx1: &[usize], idx2: &[usize], beta: f64) -> Result<LossEval> {
    objective_loss(model, Objective::Gdkl, idx1, idx2, beta)
}

pub fn dist_loss(model: &mut GdklModel, idx1: &[usize], idx2: &[usize]) -> Result<LossEval> {
    objective_loss(model, Objective::Dist, idx1, idx2, 1.0)
}

pub fn pred_loss(model: &mut GdklModel, idx1: &[usize], idx2: &[usize]) -> Result<LossEval> {
    objective_loss(model, Objective::Pred, idx1, idx2, 1.0)
}

/// Two optimizer states over a deep kernel's parameters: one for the network
/// (with weight decay) and one for the kernel hyperparameters.
pub(crate) struct KernelOptimizer {
    net: OptimizerState,
    hyper: OptimizerState,
    split: usize,
}

impl KernelOptimizer {
    pub(crate) fn new(config: &TrainConfig, num_net: usize, num_hyper: usize) -> Self {
        let make = |n, wd| OptimizerState::new(config.optimizer, n, config.learning_rate, config.milestones.clone(), wd);
        Self {
            net: make(num_net, config.weight_decay),
            hyper: make(num_hyper, 0.0),
            split: num_net,
        }
    }

    pub(crate) fn step(&mut self, params: &mut [f64], grad: &[f64], step: usize, total: usize) -> Result<()> {
        let (pn, ph) = params.split_at_mut(self.split);
        let (gn, gh) = grad.split_at(self.split);
        self.net.step(pn, gn, step, total)?;
        self.hyper.step(ph, gh, step, total)
    }
}

pub(crate) fn check_loss(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step, loss })
    }
}

/// Pre-trains the NNGP, then runs `total_steps` of the configured objective,
/// drawing a fresh split every step.
pub fn train_gdkl(config: &TrainConfig, data: &Dataset) -> Result<GdklModel> {
    let mut model = GdklModel::init(config, data.clone())?;
    let mut rng = stream_rng(config.seed, STREAM_SPLITS);
    let mut opt = KernelOptimizer::new(config, model.kernel.network.num_params(), 3);
    let mut params = model.kernel.parameters();
    for step in 0..config.total_steps {
        let (idx1, idx2) = split_indices(data.len(), config.split_fraction, &mut rng)?;
        let eval = objective_loss(&mut model, config.objective, &idx1, &idx2, config.beta)?;
        check_loss(step, eval.value)?;
        model.loss_history.push(eval.value);
        opt.step(&mut params, &eval.grad, step, config.total_steps)?;
        model.kernel.set_parameters(&params)?;
        if step % 1000 == 0 {
            log::debug!("gdkl step {step}: loss {:.5}", eval.value);
        }
    }
    Ok(model)
}

/// Exact deep-kernel prediction conditioned on the full training set.
pub fn predict(model: &GdklModel, x_test: &DMatrix<f64>) -> Result<Predictive> {
    model.predict(x_test)
}

/// `−LML/n` of an RBF GP on the given features, with `∂/∂K` and `∂/∂σ²`.
fn rbf_lml(f: &DMatrix<f64>, head: &RbfHead, noise_var: f64, data: &Dataset) -> Result<(f64, DMatrix<f64>, DMatrix<f64>, f64)> {
    let k = rbf_kernel(f, f, &head.params())?;
    let noise = match &data.noise_var {
        Some(m) => Noise::PerPoint(m),
        None => Noise::Shared(noise_var),
    };
    let lg = lml_with_grad(&k, &data.targets, noise)?;
    let scale = -1.0 / data.len() as f64;
    Ok((lg.value * scale, k, lg.d_kernel * scale, lg.d_noise * scale))
}

/// Deep kernel learning by marginal likelihood: `−LML/n` and its gradient.
pub fn dkl_loss(kernel: &mut DeepKernel, data: &Dataset) -> Result<LossEval> {
    let f = kernel.network.forward_recorded(&data.inputs)?;
    let (value, k, g, d_noise) = rbf_lml(&f, &kernel.head, kernel.noise.value(), data)?;
    let grad = kernel.backward(&f, &k, &g, 0.0, d_noise)?;
    Ok(LossEval {
        value,
        data_term: value,
        kl_term: 0.0,
        grad,
    })
}

/// Trained DKL baseline with its loss trace.
#[derive(Debug, Clone)]
pub struct DklModel {
    pub kernel: DeepKernel,
    pub train: Dataset,
    pub loss_history: Vec<f64>,
}

impl DklModel {
    pub fn predict(&self, x_test: &DMatrix<f64>) -> Result<Predictive> {
        self.kernel.predict(&self.train, x_test)
    }
}

pub fn train_dkl(config: &TrainConfig, data: &Dataset) -> Result<DklModel> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, STREAM_INIT);
    let mut kernel = DeepKernel::init(data.input_dim(), config, &mut rng)?;
    let mut opt = KernelOptimizer::new(config, kernel.network.num_params(), 3);
    let mut params = kernel.parameters();
    let mut loss_history = Vec::with_capacity(config.total_steps);
    for step in 0..config.total_steps {
        let eval = dkl_loss(&mut kernel, data)?;
        check_loss(step, eval.value)?;
        loss_history.push(eval.value);
        opt.step(&mut params, &eval.grad, step, config.total_steps)?;
        kernel.set_parameters(&params)?;
    }
    Ok(DklModel {
        kernel,
        train: data.clone(),
        loss_history,
    })
}

/// Plain RBF GP on the raw inputs.
#[derive(Debug, Clone)]
pub struct RbfGp {
    pub head: RbfHead,
    pub noise: Positive,
    pub train: Dataset,
}

impl RbfGp {
    pub fn new(config: &TrainConfig, train: Dataset) -> Result<Self> {
        Ok(Self {
            head: RbfHead::new(config.lengthscale_init, config.outputscale_init)?,
            noise: Positive::new(config.noise_init)?,
            train,
        })
    }

    pub fn parameters(&self) -> [f64; 3] {
        [self.head.lengthscale.raw, self.head.outputscale.raw, self.noise.raw]
    }

    pub fn set_parameters(&mut self, p: &[f64; 3]) {
        self.head.lengthscale.raw = p[0];
        self.head.outputscale.raw = p[1];
        self.noise.raw = p[2];
    }

    /// `−LML/n` and its gradient over the raw hyperparameters.
    pub fn loss(&self) -> Result<(f64, [f64; 3])> {
        let x = &self.train.inputs;
        let (value, k, g, d_noise) = rbf_lml(x, &self.head, self.noise.value(), &self.train)?;
        let rg = rbf_backward(x, x, &k, &g, &self.head.params());
        Ok((
            value,
            [
                rg.d_lengthscale * self.head.lengthscale.derivative(),
                rg.d_outputscale * self.head.outputscale.derivative(),
                d_noise * self.noise.derivative(),
            ],
        ))
    }

    pub fn predict(&self, x_test: &DMatrix<f64>) -> Result<Predictive> {
        exact_rbf_predict(&self.train.inputs, x_test, &self.train, &self.head, self.noise.value())
    }
}

pub fn train_gp_rbf(config: &TrainConfig, data: &Dataset) -> Result<RbfGp> {
    config.validate()?;
    let mut gp = RbfGp::new(config, data.clone())?;
    let mut opt = OptimizerState::new(config.optimizer, 3, config.learning_rate, config.milestones.clone(), 0.0);
    let mut params = gp.parameters();
    for step in 0..config.total_steps {
        let (value, grad) = gp.loss()?;
        check_loss(step, value)?;
        opt.step(&mut params, &grad, step, config.total_steps)?;
        gp.set_parameters(&params);
    }
    Ok(gp)
}

/// NNGP regression baseline: kernel hyperparameters fitted by
/// `pretrain_steps` of marginal-likelihood ascent.
pub fn train_nngp(config: &TrainConfig, data: &Dataset) -> Result<FrozenNngp> {
    config.validate()?;
    FrozenNngp::fit(
        config.nngp_params()?,
        data,
        config.pretrain_steps,
        config.outputscale_init,
        config.noise_init,
    )
}

/// SHA-256 over the shapes and little-endian values of a dataset.
pub fn dataset_fingerprint(data: &Dataset) -> String {
    let mut h = Sha256::new();
    let mut feed = |m: &DMatrix<f64>| {
        h.update((m.nrows() as u64).to_le_bytes());
        h.update((m.ncols() as u64).to_le_bytes());
        for v in m.iter() {
            h.update(v.to_le_bytes());
        }
    };
    feed(&data.inputs);
    feed(&data.targets);
    if let Some(m) = &data.noise_var {
        feed(m);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON-serializable snapshot of a [`GdklModel`] without its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub layer_sizes: Vec<usize>,
    pub network: Vec<f64>,
    pub lengthscale_raw: f64,
    pub outputscale_raw: f64,
    pub noise_raw: f64,
    pub noise_wiring: NoiseWiring,
    pub nngp: NngpParams,
    pub nngp_outputscale: f64,
    pub nngp_noise_var: f64,
    pub dataset_sha256: String,
}

impl GdklModel {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            layer_sizes: self.kernel.network.layer_sizes().to_vec(),
            network: self.kernel.network.params().to_vec(),
            lengthscale_raw: self.kernel.head.lengthscale.raw,
            outputscale_raw: self.kernel.head.outputscale.raw,
            noise_raw: self.kernel.noise.raw,
            noise_wiring: self.noise_wiring,
            nngp: self.nngp.params,
            nngp_outputscale: self.nngp.outputscale,
            nngp_noise_var: self.nngp.noise_var,
            dataset_sha256: dataset_fingerprint(&self.train),
        }
    }

    /// Rebuilds a model from a checkpoint and the dataset it was trained on;
    /// the NNGP matrix is re-evaluated.
    pub fn restore(ckpt: &Checkpoint, train: Dataset) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        let fp = dataset_fingerprint(&train);
        if fp != ckpt.dataset_sha256 {
            return Err(Error::Config(format!(
                "dataset fingerprint {fp} does not match checkpoint {}",
                ckpt.dataset_sha256
            )));
        }
        let raw = nngp_kernel(&train.inputs, &train.inputs, &ckpt.nngp)?;
        Ok(Self {
            kernel: DeepKernel {
                network: FeatureNetwork::from_params(&ckpt.layer_sizes, ckpt.network.clone())?,
                head: RbfHead {
                    lengthscale: Positive::from_raw(ckpt.lengthscale_raw),
                    outputscale: Positive::from_raw(ckpt.outputscale_raw),
                },
                noise: Positive::from_raw(ckpt.noise_raw),
            },
            nngp: FrozenNngp {
                params: ckpt.nngp,
                raw,
                outputscale: ckpt.nngp_outputscale,
                noise_var: ckpt.nngp_noise_var,
            },
            train,
            noise_wiring: ckpt.noise_wiring,
            loss_history: Vec::new(),
        })
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, &self.checkpoint())?;
        Ok(())
    }

    pub fn load<R: Read>(r: R, train: Dataset) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_reader(r)?;
        Self::restore(&ckpt, train)
    }

    pub fn save_to_path(&self, path: &Path) -> Result<()> {
        self.save(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}
