//! Inducing-point variant: `q_θ(f) = ∫ p_θ(f|u) q(u) du` with inducing inputs
//! in the network's feature space, the batched two-pass GDKL objective, and
//! sparse prediction.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::gp::{
    cholesky_with_jitter, softplus, softplus_inverse, CholeskyFactor, Dataset, GaussianPosterior, Positive,
    DEFAULT_JITTER, VARIANCE_FLOOR,
};
use crate::kernels::{rbf_backward, rbf_kernel, squared_distances, RbfParams};
use crate::objectives::{ell_with_grad, kl_with_grad};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::train::{
    check_loss, split_indices, stream_rng, DeepKernel, FrozenNngp, KernelOptimizer, LossEval, NoiseWiring,
    Predictive, TrainConfig, STREAM_INIT, STREAM_SPLITS,
};

const LLOYD_ITERATIONS: usize = 25;
const INITIAL_SCALE: f64 = 1e-2;
const STREAM_BATCHES: u64 = 2;

/// Inducing locations `Z` (`m×p`), variational means (`m×c`) and, per
/// output, the raw lower factor of the variational covariance. Diagonal
/// entries of a raw factor pass through softplus.
#[derive(Debug, Clone, PartialEq)]
pub struct InducingSet {
    pub z: DMatrix<f64>,
    pub means: DMatrix<f64>,
    pub raw_factors: Vec<DMatrix<f64>>,
}

impl InducingSet {
    pub fn new(z: DMatrix<f64>, outputs: usize) -> Result<Self> {
        let m = z.nrows();
        if m == 0 {
            return Err(Error::TooFewPoints { needed: 1, got: 0 });
        }
        let mut raw = DMatrix::zeros(m, m);
        raw.fill_diagonal(softplus_inverse(INITIAL_SCALE));
        Ok(Self {
            z,
            means: DMatrix::zeros(m, outputs),
            raw_factors: vec![raw; outputs],
        })
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    pub fn outputs(&self) -> usize {
        self.means.ncols()
    }

    /// `S_L` for output `c`.
    pub fn factor(&self, c: usize) -> DMatrix<f64> {
        let raw = &self.raw_factors[c];
        let m = raw.nrows();
        DMatrix::from_fn(m, m, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => raw[(i, j)],
            std::cmp::Ordering::Equal => softplus(raw[(i, i)]),
            std::cmp::Ordering::Less => 0.0,
        })
    }

    pub fn covariance(&self, c: usize) -> DMatrix<f64> {
        let l = self.factor(c);
        &l * l.transpose()
    }

    /// Sets output `c`'s covariance to `s`, jittered if not positive definite.
    pub fn set_covariance(&mut self, c: usize, s: &DMatrix<f64>) -> Result<()> {
        let f = cholesky_with_jitter(s, DEFAULT_JITTER)?;
        let l = f.lower();
        let m = l.nrows();
        self.raw_factors[c] = DMatrix::from_fn(m, m, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => l[(i, j)],
            std::cmp::Ordering::Equal => softplus_inverse(l[(i, i)]),
            std::cmp::Ordering::Less => 0.0,
        });
        Ok(())
    }

    fn num_factor_entries(&self) -> usize {
        let m = self.len();
        m * (m + 1) / 2
    }

    /// Flat layout: `Z` column-major, means column-major, then the lower
    /// triangle of each raw factor column by column.
    pub fn num_parameters(&self) -> usize {
        self.z.len() + self.means.len() + self.outputs() * self.num_factor_entries()
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_parameters());
        p.extend(self.z.iter());
        p.extend(self.means.iter());
        for raw in &self.raw_factors {
            push_lower(&mut p, raw);
        }
        p
    }

    pub fn set_parameters(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_parameters() {
            return Err(Error::LengthMismatch {
                expected: self.num_parameters(),
                got: p.len(),
            });
        }
        let (zl, ml) = (self.z.len(), self.means.len());
        self.z.as_mut_slice().copy_from_slice(&p[..zl]);
        self.means.as_mut_slice().copy_from_slice(&p[zl..zl + ml]);
        let mut offset = zl + ml;
        let m = self.len();
        for raw in &mut self.raw_factors {
            for j in 0..m {
                for i in j..m {
                    raw[(i, j)] = p[offset];
                    offset += 1;
                }
            }
        }
        Ok(())
    }
}

fn push_lower(p: &mut Vec<f64>, a: &DMatrix<f64>) {
    let m = a.nrows();
    for j in 0..m {
        for i in j..m {
            p.push(a[(i, j)]);
        }
    }
}

/// k-means++ seeding followed by Lloyd iterations on the rows of `features`;
/// zero means and `S_L = 0.01·I`.
pub fn init_inducing<R: Rng + ?Sized>(features: &DMatrix<f64>, m: usize, outputs: usize, rng: &mut R) -> Result<InducingSet> {
    let n = features.nrows();
    if m == 0 || m > n {
        return Err(Error::TooFewPoints { needed: m.max(1), got: n });
    }
    let p = features.ncols();
    let row = |i: usize| features.row(i).clone_owned();

    let mut centers = DMatrix::zeros(m, p);
    let first = rng.random_range(0..n);
    centers.set_row(0, &row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| (features.row(i) - centers.row(0)).norm_squared()).collect();
    for k in 1..m {
        let total: f64 = nearest.iter().sum();
        if total <= 0.0 {
            if k == 1 {
                return Err(Error::DegenerateFeatures(m));
            }
            let pick = rng.random_range(0..n);
            centers.set_row(k, &row(pick));
            continue;
        }
        let mut target = rng.random_range(0.0..total);
        let mut pick = n - 1;
        for (i, d) in nearest.iter().enumerate() {
            if target < *d {
                pick = i;
                break;
            }
            target -= d;
        }
        centers.set_row(k, &row(pick));
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min((features.row(i) - centers.row(k)).norm_squared());
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for _ in 0..LLOYD_ITERATIONS {
        let d2 = squared_distances(features, &centers);
        let mut changed = false;
        for i in 0..n {
            let best = (0..m)
                .min_by(|&a, &b| d2[(i, a)].total_cmp(&d2[(i, b)]))
                .unwrap_or(0);
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = DMatrix::zeros(m, p);
        let mut counts = vec![0usize; m];
        for i in 0..n {
            let k = assignment[i];
            counts[k] += 1;
            let mut r = sums.row_mut(k);
            r += features.row(i);
        }
        for k in 0..m {
            if counts[k] > 0 {
                let c = sums.row(k) / counts[k] as f64;
                centers.set_row(k, &c);
            }
        }
    }
    InducingSet::new(centers, outputs)
}

/// Forward state of the sparse posterior, kept for the reverse pass.
struct SparseForward {
    kzz: DMatrix<f64>,
    kzs: DMatrix<f64>,
    factor: CholeskyFactor,
    /// `K_zz⁻¹ K_z*`.
    w: DMatrix<f64>,
    /// `K_zz⁻¹ m_u` per output.
    a: DMatrix<f64>,
    factors: Vec<DMatrix<f64>>,
    posterior: GaussianPosterior,
    floored: DMatrix<bool>,
}

fn sparse_forward(inducing: &InducingSet, head: &RbfParams, phi: &DMatrix<f64>) -> Result<SparseForward> {
    let z = &inducing.z;
    if z.ncols() != phi.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "inducing points are {}-dim, features are {}-dim",
            z.ncols(),
            phi.ncols()
        )));
    }
    let c = inducing.outputs();
    let n = phi.nrows();
    let kzz = rbf_kernel(z, z, head)?;
    let kzs = rbf_kernel(z, phi, head)?;
    let factor = cholesky_with_jitter(&kzz, DEFAULT_JITTER)?;
    let w = factor.solve(&kzs);
    let a = factor.solve(&inducing.means);
    let factors: Vec<DMatrix<f64>> = (0..c).map(|k| inducing.factor(k)).collect();

    let mut mean = DMatrix::zeros(n, c);
    let mut variance = DMatrix::zeros(n, c);
    let mut floored = DMatrix::from_element(n, c, false);
    let base: Vec<f64> = (0..n)
        .map(|j| head.outputscale - kzs.column(j).dot(&w.column(j)))
        .collect();
    let mu = kzs.transpose() * &a;
    for k in 0..c {
        let lw = factors[k].transpose() * &w;
        for j in 0..n {
            mean[(j, k)] = mu[(j, k)];
            let v = base[j] + lw.column(j).norm_squared();
            if v < VARIANCE_FLOOR {
                variance[(j, k)] = VARIANCE_FLOOR;
                floored[(j, k)] = true;
            } else {
                variance[(j, k)] = v;
            }
        }
    }
    Ok(SparseForward {
        kzz,
        kzs,
        factor,
        w,
        a,
        factors,
        posterior: GaussianPosterior { mean, variance },
        floored,
    })
}

/// Adjoints of the sparse posterior.
struct SparseGrads {
    d_z: DMatrix<f64>,
    d_phi: DMatrix<f64>,
    d_means: DMatrix<f64>,
    /// With respect to the actual lower factors, lower triangle only.
    d_factors: Vec<DMatrix<f64>>,
    d_lengthscale: f64,
    d_outputscale: f64,
}

fn sparse_backward(
    fw: &SparseForward,
    inducing: &InducingSet,
    head: &RbfParams,
    phi: &DMatrix<f64>,
    g_mean: &DMatrix<f64>,
    g_var: &DMatrix<f64>,
) -> SparseGrads {
    let m = inducing.len();
    let n = phi.nrows();
    let c = inducing.outputs();
    let mut d_kzs = DMatrix::zeros(m, n);
    let mut d_kzz = DMatrix::zeros(m, m);
    let mut d_means = DMatrix::zeros(m, c);
    let mut d_factors = Vec::with_capacity(c);
    let mut d_kss = 0.0;

    for k in 0..c {
        let gm = g_mean.column(k).clone_owned();
        let gv = DVector::from_fn(n, |j, _| if fw.floored[(j, k)] { 0.0 } else { g_var[(j, k)] });
        d_kss += gv.sum();

        // μ = K_*zᵀ A⁻¹ m
        let a = fw.a.column(k);
        let wg = &fw.w * &gm;
        d_means.set_column(k, &wg);
        d_kzs.ger(1.0, &a, &gm, 1.0);
        d_kzz.ger(-1.0, &wg, &a, 1.0);

        // σ² = k** − diag(Wᵀ K_z*) + diag(Wᵀ S W)
        let mut w_g = fw.w.clone();
        for (j, mut col) in w_g.column_iter_mut().enumerate() {
            col *= gv[j];
        }
        let l = &fw.factors[k];
        let s = l * l.transpose();
        let u = fw.factor.solve(&(&s * &fw.w));
        let mut u_g = u;
        for (j, mut col) in u_g.column_iter_mut().enumerate() {
            col *= gv[j];
        }
        d_kzs += (&u_g - &w_g) * 2.0;
        let d_s = &w_g * fw.w.transpose();
        d_kzz += &d_s;
        d_kzz.gemm(-2.0, &u_g, &fw.w.transpose(), 1.0);
        let mut d_l = (&d_s + d_s.transpose()) * l;
        for j in 0..m {
            for i in 0..j {
                d_l[(i, j)] = 0.0;
            }
        }
        d_factors.push(d_l);
    }

    let z = &inducing.z;
    let gz = rbf_backward(z, z, &fw.kzz, &d_kzz, head);
    let gs = rbf_backward(z, phi, &fw.kzs, &d_kzs, head);
    SparseGrads {
        d_z: gz.d_a + gz.d_b + gs.d_a,
        d_phi: gs.d_b,
        d_means,
        d_factors,
        d_lengthscale: gz.d_lengthscale + gs.d_lengthscale,
        d_outputscale: gz.d_outputscale + gs.d_outputscale + d_kss,
    }
}

/// `μ* = k_z*ᵀK_zz⁻¹m_u`, `σ*² = k** − k_z*ᵀK_zz⁻¹k_z* + k_z*ᵀK_zz⁻¹SK_zz⁻¹k_z*`
/// for feature rows `phi`.
pub fn sparse_posterior(inducing: &InducingSet, head: &RbfParams, phi: &DMatrix<f64>) -> Result<GaussianPosterior> {
    Ok(sparse_forward(inducing, head, phi)?.posterior)
}

/// Gradient of a flat-parameter function in [`InducingSet`] layout.
fn flatten_inducing_grad(inducing: &InducingSet, g: &SparseGrads, include_z: bool) -> Vec<f64> {
    let mut p = Vec::with_capacity(inducing.num_parameters());
    if include_z {
        p.extend(g.d_z.iter());
    } else {
        p.extend(std::iter::repeat_n(0.0, inducing.z.len()));
    }
    p.extend(g.d_means.iter());
    for (k, d_l) in g.d_factors.iter().enumerate() {
        let raw = &inducing.raw_factors[k];
        let mut d_raw = d_l.clone();
        for i in 0..raw.nrows() {
            d_raw[(i, i)] *= Positive::from_raw(raw[(i, i)]).derivative();
        }
        push_lower(&mut p, &d_raw);
    }
    p
}

/// Sparse GDKL model: a deep kernel, its inducing set, and the frozen NNGP
/// over the training set.
#[derive(Debug, Clone)]
pub struct SparseGdklModel {
    pub kernel: DeepKernel,
    pub inducing: InducingSet,
    pub nngp: FrozenNngp,
    pub train: Dataset,
    pub noise_wiring: NoiseWiring,
    pub loss_history: Vec<f64>,
}

/// Features of at most this many training points seed the k-means
/// initialization.
const INIT_SAMPLE: usize = 2000;

impl SparseGdklModel {
    pub fn init(config: &TrainConfig, train: Dataset, m: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, STREAM_INIT);
        let kernel = DeepKernel::init(train.input_dim(), config, &mut rng)?;
        let n = train.len();
        let rows = sample(&mut rng, n, n.min(INIT_SAMPLE)).into_vec();
        let features = kernel.features(&train.inputs.select_rows(&rows))?;
        let inducing = init_inducing(&features, m, train.output_dim(), &mut rng)?;
        let nngp = FrozenNngp::fit(
            config.nngp_params()?,
            &train,
            config.pretrain_steps,
            config.outputscale_init,
            config.noise_init,
        )?;
        Ok(Self {
            kernel,
            inducing,
            nngp,
            train,
            noise_wiring: config.noise_wiring,
            loss_history: Vec::new(),
        })
    }

    pub fn effective_noise(&self) -> f64 {
        match self.noise_wiring {
            NoiseWiring::Separate => self.kernel.noise.value(),
            NoiseWiring::Shared => self.nngp.noise_var,
        }
    }

    /// Deep-kernel parameters, then the inducing set.
    pub fn parameters(&self) -> Vec<f64> {
        let mut p = self.kernel.parameters();
        p.extend(self.inducing.parameters());
        p
    }

    pub fn set_parameters(&mut self, p: &[f64]) -> Result<()> {
        let k = self.kernel.num_parameters();
        if p.len() != k + self.inducing.num_parameters() {
            return Err(Error::LengthMismatch {
                expected: k + self.inducing.num_parameters(),
                got: p.len(),
            });
        }
        self.kernel.set_parameters(&p[..k])?;
        self.inducing.set_parameters(&p[k..])
    }

    pub fn predict(&self, x_test: &DMatrix<f64>) -> Result<Predictive> {
        let phi = self.kernel.features(x_test)?;
        let latent = sparse_posterior(&self.inducing, &self.kernel.head.params(), &phi)?;
        let marginal = latent.with_noise(self.effective_noise());
        Ok(Predictive { latent, marginal })
    }
}

/// Two-pass batch objective: split `batch` into halves, score each half
/// against the sparse posterior and the NNGP conditioned on the other half,
/// and average the passes.
pub fn sparse_gdkl_loss<R: Rng + ?Sized>(
    model: &mut SparseGdklModel,
    batch: &[usize],
    beta: f64,
    rng: &mut R,
) -> Result<LossEval> {
    let (h1, h2) = split_indices(batch.len(), 0.5, rng)?;
    let b1: Vec<usize> = h1.iter().map(|&i| batch[i]).collect();
    let b2: Vec<usize> = h2.iter().map(|&i| batch[i]).collect();
    sparse_gdkl_loss_split(model, &b1, &b2, beta)
}

/// [`sparse_gdkl_loss`] with the halves given.
pub fn sparse_gdkl_loss_split(model: &mut SparseGdklModel, b1: &[usize], b2: &[usize], beta: f64) -> Result<LossEval> {
    if b1.is_empty() || b2.is_empty() {
        return Err(Error::TooFewPoints { needed: 2, got: b1.len() + b2.len() });
    }
    let all: Vec<usize> = b1.iter().chain(b2).copied().collect();
    let c = model.train.output_dim();
    let x = model.train.inputs.select_rows(&all);
    let phi = model.kernel.network.forward_recorded(&x)?;
    let head = model.kernel.head.params();
    let fw = sparse_forward(&model.inducing, &head, &phi)?;
    let y = model.train.targets.select_rows(&all);
    let per_point = model.train.noise_var.as_ref().map(|m| m.select_rows(&all));
    let learned = model.noise_wiring == NoiseWiring::Separate && per_point.is_none();
    let noise = model.effective_noise();

    // NNGP posterior for each point given the opposite half
    let p2 = model.nngp.conditional(&model.train, b1, b2)?;
    let p1 = model.nngp.conditional(&model.train, b2, b1)?;
    let n1 = b1.len();
    let nngp_at = |r: usize, k: usize| {
        if r < n1 {
            (p1.mean[(r, k)], p1.variance[(r, k)])
        } else {
            (p2.mean[(r - n1, k)], p2.variance[(r - n1, k)])
        }
    };

    let n = all.len();
    let mut g_mean = DMatrix::zeros(n, c);
    let mut g_var = DMatrix::zeros(n, c);
    let (mut data_term, mut kl_term, mut d_noise) = (0.0, 0.0, 0.0);
    for r in 0..n {
        // each pass averages over its scored half; the two passes are averaged
        let w = 0.5 / if r < n1 { n1 } else { n - n1 } as f64;
        for k in 0..c {
            let (mq, vq) = (fw.posterior.mean[(r, k)], fw.posterior.variance[(r, k)]);
            let nv = per_point.as_ref().map_or(noise, |m| m[(r, k)]);
            let e = ell_with_grad(mq, vq, y[(r, k)], nv);
            let (mp, vp) = nngp_at(r, k);
            let kl = kl_with_grad(mq, vq, mp, vp);
            let kw = w / c as f64;
            data_term += w * e.value;
            kl_term += kw * kl.value;
            g_mean[(r, k)] = w * e.d_mean + beta * kw * kl.d_mean;
            g_var[(r, k)] = w * e.d_var + beta * kw * kl.d_var;
            d_noise += w * e.d_noise;
        }
    }
    let sg = sparse_backward(&fw, &model.inducing, &head, &phi, &g_mean, &g_var);
    model.kernel.network.zero_grad();
    let mut grad = model.kernel.network.backward(&sg.d_phi)?.to_vec();
    grad.push(sg.d_lengthscale * model.kernel.head.lengthscale.derivative());
    grad.push(sg.d_outputscale * model.kernel.head.outputscale.derivative());
    grad.push(if learned { d_noise * model.kernel.noise.derivative() } else { 0.0 });
    grad.extend(flatten_inducing_grad(&model.inducing, &sg, true));
    Ok(LossEval {
        value: data_term + beta * kl_term,
        data_term,
        kl_term,
        grad,
    })
}

/// Minibatch training of every parameter: network, head, noise, `Z`, `m_u`
/// and `S_L`.
pub fn train_sparse_gdkl(config: &TrainConfig, data: &Dataset, batch_size: usize, m: usize) -> Result<SparseGdklModel> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch_size must be at least 2, got {batch_size}")));
    }
    let mut model = SparseGdklModel::init(config, data.clone(), m)?;
    let mut batch_rng = stream_rng(config.seed, STREAM_BATCHES);
    let mut split_rng = stream_rng(config.seed, STREAM_SPLITS);
    let num_net = model.kernel.network.num_params();
    let mut opt = KernelOptimizer::new(config, num_net, model.parameters().len() - num_net);
    let mut params = model.parameters();
    let n = data.len();
    let b = batch_size.min(n);
    for step in 0..config.total_steps {
        let batch = sample(&mut batch_rng, n, b).into_vec();
        let eval = sparse_gdkl_loss(&mut model, &batch, config.beta, &mut split_rng)?;
        check_loss(step, eval.value)?;
        model.loss_history.push(eval.value);
        opt.step(&mut params, &eval.grad, step, config.total_steps)?;
        model.set_parameters(&params)?;
    }
    Ok(model)
}

pub fn sparse_predict(model: &SparseGdklModel, x_test: &DMatrix<f64>) -> Result<Predictive> {
    model.predict(x_test)
}

/// `ELBO = Σᵢ E_q[log N(yᵢ | fᵢ, σ²)] − KL[q(u) ‖ p(u)]` for fixed features,
/// with its gradient over `(m_u, S_L)` in [`InducingSet`] layout (`Z` entries
/// zero).
pub fn svgp_elbo(inducing: &InducingSet, head: &RbfParams, phi: &DMatrix<f64>, y: &DMatrix<f64>, noise_var: f64) -> Result<(f64, Vec<f64>)> {
    let fw = sparse_forward(inducing, head, phi)?;
    let (n, c) = (phi.nrows(), inducing.outputs());
    let mut g_mean = DMatrix::zeros(n, c);
    let mut g_var = DMatrix::zeros(n, c);
    let mut value = 0.0;
    for k in 0..c {
        for j in 0..n {
            let e = ell_with_grad(fw.posterior.mean[(j, k)], fw.posterior.variance[(j, k)], y[(j, k)], noise_var);
            value -= e.value;
            g_mean[(j, k)] = -e.d_mean;
            g_var[(j, k)] = -e.d_var;
        }
    }
    let mut sg = sparse_backward(&fw, inducing, head, phi, &g_mean, &g_var);

    // KL[N(m, S) ‖ N(0, K)] = ½(tr K⁻¹S + mᵀK⁻¹m − M + ln|K| − ln|S|)
    let m = inducing.len();
    let k_inv = fw.factor.inverse();
    for k in 0..c {
        let l = &fw.factors[k];
        let s = l * l.transpose();
        let a = fw.a.column(k);
        let log_det_s: f64 = 2.0 * (0..m).map(|i| l[(i, i)].ln()).sum::<f64>();
        value -= 0.5 * ((&k_inv * &s).trace() + inducing.means.column(k).dot(&a) - m as f64 + fw.factor.log_det() - log_det_s);
        let mut dm = sg.d_means.column_mut(k);
        dm -= &a;
        // ∂KL/∂L = K⁻¹L − L⁻ᵀ, lower part
        let l_inv_t = cholesky_like_inverse_transpose(l);
        let mut d_l = &k_inv * l - l_inv_t;
        for j in 0..m {
            for i in 0..j {
                d_l[(i, j)] = 0.0;
            }
        }
        sg.d_factors[k] -= d_l;
    }
    Ok((value, flatten_inducing_grad(inducing, &sg, false)))
}

fn cholesky_like_inverse_transpose(l: &DMatrix<f64>) -> DMatrix<f64> {
    let m = l.nrows();
    let inv = l
        .clone()
        .solve_lower_triangular(&DMatrix::identity(m, m))
        .unwrap_or_else(|| DMatrix::zeros(m, m));
    inv.transpose()
}

/// Maximizes [`svgp_elbo`] over `(m_u, S_L)` with Adam, leaving `Z` and the
/// kernel fixed. Returns the ELBO trace.
pub fn fit_variational(
    inducing: &mut InducingSet,
    head: &RbfParams,
    phi: &DMatrix<f64>,
    y: &DMatrix<f64>,
    noise_var: f64,
    steps: usize,
    learning_rate: f64,
) -> Result<Vec<f64>> {
    let mut params = inducing.parameters();
    let mut opt = OptimizerState::new(OptimizerKind::adam(), params.len(), learning_rate, vec![0.6, 0.8], 0.0);
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let (value, grad) = svgp_elbo(inducing, head, phi, y, noise_var)?;
        check_loss(step, value)?;
        trace.push(value);
        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
        opt.step(&mut params, &neg, step, steps)?;
        inducing.set_parameters(&params)?;
    }
    Ok(trace)
}
