//! Closed forms against independent numerical routes.

mod common;

use common::{regression, rng};
use gdkl::gp::{log_marginal_likelihood, posterior_predictive, Dataset};
use gdkl::kernels::{deep_kernel, nngp_kernel, rbf_kernel, NngpParams, RbfParams};
use gdkl::nn::FeatureNetwork;
use gdkl::objectives::{expected_nll_gaussian, kl_gaussians, predictive_nll_gaussian};
use gdkl::sparse::{sparse_posterior, InducingSet};
use gdkl::train::{
    dist_loss, gdkl_loss, pred_loss, pretrain_nngp, GdklModel, NoiseWiring, TrainConfig,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

fn ln_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mean).powi(2) / var)
}

fn add_diag(m: &DMatrix<f64>, v: f64) -> DMatrix<f64> {
    let mut out = m.clone();
    for i in 0..m.nrows() {
        out[(i, i)] += v;
    }
    out
}

/// Conditions the joint Gaussian over (train, test) by the Schur complement,
/// using a general inverse.
fn joint_conditioning(full: &DMatrix<f64>, n: usize, y: &DMatrix<f64>, noise: f64) -> (Vec<f64>, Vec<f64>) {
    let t = full.nrows() - n;
    let a = add_diag(&full.view((0, 0), (n, n)).clone_owned(), noise);
    let b = full.view((0, n), (n, t)).clone_owned();
    let c = full.view((n, n), (t, t)).clone_owned();
    let a_inv = a.try_inverse().unwrap();
    let mean = b.transpose() * &a_inv * y;
    let cov = c - b.transpose() * &a_inv * &b;
    ((0..t).map(|j| mean[(j, 0)]).collect(), (0..t).map(|j| cov[(j, j)]).collect())
}

#[test]
fn posterior_matches_joint_conditioning() {
    let mut r = rng(11);
    for n in 1..=3 {
        let x: DMatrix<f64> = DMatrix::from_fn(n + 2, 2, |_, _| r.random_range(-1.5..1.5));
        let params = RbfParams::new(0.7, 1.4).unwrap();
        let full = rbf_kernel(&x, &x, &params).unwrap();
        let y: DMatrix<f64> = DMatrix::from_fn(n, 1, |_, _| r.random_range(-1.0..1.0));
        let noise = 0.03;
        let train = Dataset::new(x.rows(0, n).clone_owned(), y.clone()).unwrap();
        let k = full.view((0, 0), (n, n)).clone_owned();
        let ks = full.view((0, n), (n, 2)).clone_owned();
        let kss = DVector::from_fn(2, |j, _| full[(n + j, n + j)]);
        let post = posterior_predictive(&train, &k, &ks, &kss, noise).unwrap();
        let (mean, var) = joint_conditioning(&full, n, &y, noise);
        for j in 0..2 {
            assert!((post.mean[(j, 0)] - mean[j]).abs() < 1e-8, "n={n} mean");
            assert!((post.variance[(j, 0)] - var[j]).abs() < 1e-8, "n={n} variance");
        }
    }
}

fn simpson<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, steps: usize) -> f64 {
    let h = (hi - lo) / steps as f64;
    let mut sum = f(lo) + f(hi);
    for i in 1..steps {
        sum += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * h / 3.0
}

#[test]
fn kl_matches_quadrature() {
    let cases = [
        ((0.0, 1.0), (0.0, 1.0)),
        ((0.5, 0.2), (-1.0, 3.0)),
        ((2.0, 4.0), (1.5, 0.5)),
        ((-0.3, 1e-2), (0.1, 2.0)),
    ];
    for (q, p) in cases {
        let closed = kl_gaussians(q, p).unwrap();
        let sd = q.1.sqrt();
        let quad = simpson(
            |x| {
                let lq = ln_normal(x, q.0, q.1);
                lq.exp() * (lq - ln_normal(x, p.0, p.1))
            },
            q.0 - 14.0 * sd,
            q.0 + 14.0 * sd,
            40_000,
        );
        assert!((closed - quad).abs() < 1e-6, "{q:?} {p:?}: {closed} vs {quad}");
    }
}

#[test]
fn expected_nll_matches_monte_carlo() {
    let mut r = rng(12);
    for &(m, v, y, noise) in &[(0.3, 0.5, 1.0, 0.2), (-1.0, 2.0, 0.5, 1.5)] {
        let closed = expected_nll_gaussian((m, v), y, noise).unwrap();
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z: f64 = r.sample(StandardNormal);
            let val = -ln_normal(y, m + v.sqrt() * z, noise);
            s += val;
            s2 += val * val;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((closed - mean).abs() < 3.0 * se, "{closed} vs {mean} ± {se}");
    }
}

#[test]
fn lml_matches_direct_density() {
    let data = regression(5, 2, 0.1, 13);
    let k = rbf_kernel(&data.inputs, &data.inputs, &RbfParams::new(1.2, 0.8).unwrap()).unwrap();
    let noise = 0.15;
    let lml = log_marginal_likelihood(&data, &k, noise).unwrap();
    let a = add_diag(&k, noise);
    let y = data.targets.column(0).clone_owned();
    let quad = (y.transpose() * a.clone().try_inverse().unwrap() * &y)[(0, 0)];
    let direct = -0.5 * (quad + a.determinant().ln() + 5.0 * (2.0 * PI).ln());
    assert!((lml - direct).abs() < 1e-8, "{lml} vs {direct}");
}

#[test]
fn deep_kernel_is_rbf_of_features() {
    let mut r = rng(14);
    let net = FeatureNetwork::init(&[3, 6, 2], &mut r).unwrap();
    let x: DMatrix<f64> = DMatrix::from_fn(4, 3, |_, _| r.random_range(-1.0..1.0));
    let head = RbfParams::new(0.9, 2.0).unwrap();
    let f = net.forward(&x).unwrap();
    let dk = deep_kernel(&x, &x, &net, &head).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let d2 = (f.row(i) - f.row(j)).norm_squared();
            let expect = 2.0 * (-d2 / (2.0 * 0.81)).exp();
            assert!((dk[(i, j)] - expect).abs() < 1e-12);
        }
    }
}

fn shared_model(seed: u64) -> (GdklModel, Vec<usize>, Vec<usize>) {
    let config = TrainConfig {
        hidden: vec![8, 8, 3],
        pretrain_steps: 200,
        noise_wiring: NoiseWiring::Shared,
        seed,
        ..TrainConfig::default()
    };
    let data = regression(30, 2, 0.2, seed);
    let model = GdklModel::init(&config, data).unwrap();
    ((model), (0..15).collect(), (15..30).collect())
}

/// KL from q(f*|x*, D1) to the NNGP posterior that also sees the label y*.
fn label_conditioned_kl(model: &GdklModel, idx1: &[usize], idx2: &[usize]) -> (f64, f64) {
    let sigma2 = model.nngp.noise_var;
    let d1 = model.train.subset(idx1);
    let x2 = model.train.inputs.select_rows(idx2);
    let q = model.kernel.predict_with_noise(&d1, &x2, sigma2).unwrap().latent;
    let p = model.nngp.conditional(&model.train, idx1, idx2).unwrap();
    let (mut kl, mut log_evidence) = (0.0, 0.0);
    for (j, &i) in idx2.iter().enumerate() {
        let y = model.train.targets[(i, 0)];
        let (mp, vp) = (p.mean[(j, 0)], p.variance[(j, 0)]);
        let v = 1.0 / (1.0 / vp + 1.0 / sigma2);
        let m = v * (mp / vp + y / sigma2);
        kl += kl_gaussians((q.mean[(j, 0)], q.variance[(j, 0)]), (m, v)).unwrap();
        log_evidence += ln_normal(y, mp, vp + sigma2);
    }
    let n2 = idx2.len() as f64;
    (kl / n2, log_evidence / n2)
}

#[test]
fn label_conditioned_kl_and_elbo_forms_differ_by_a_constant() {
    let (mut model, idx1, idx2) = shared_model(15);
    let base = model.kernel.parameters();
    let mut r = rng(16);
    let mut diffs = Vec::new();
    for _ in 0..5 {
        let p: Vec<f64> = base.iter().map(|v| v + r.random_range(-0.3..0.3)).collect();
        model.kernel.set_parameters(&p).unwrap();
        let elbo_form = gdkl_loss(&mut model, &idx1, &idx2, 1.0).unwrap().value;
        let (kl_form, log_evidence) = label_conditioned_kl(&model, &idx1, &idx2);
        let d = elbo_form - kl_form;
        assert!((d + log_evidence).abs() < 1e-8, "constant is −log p(y*|x*, D1)");
        diffs.push(d);
    }
    for d in &diffs[1..] {
        assert!((d - diffs[0]).abs() < 1e-8, "{diffs:?}");
    }
}

#[test]
fn dist_is_the_large_beta_limit() {
    let (mut model, idx1, idx2) = shared_model(17);
    let beta = 1e6;
    let big = gdkl_loss(&mut model, &idx1, &idx2, beta).unwrap();
    let dist = dist_loss(&mut model, &idx1, &idx2).unwrap();
    assert!((big.value / beta - dist.value).abs() < 1e-5 * dist.value.abs().max(1.0));
    for (g, d) in big.grad.iter().zip(&dist.grad) {
        assert!((g / beta - d).abs() < 1e-5 * d.abs().max(1.0));
    }
}

#[test]
fn pred_loss_is_below_beta_zero_by_the_jensen_gap() {
    let (mut model, idx1, idx2) = shared_model(18);
    let zero = gdkl_loss(&mut model, &idx1, &idx2, 0.0).unwrap();
    let pred = pred_loss(&mut model, &idx1, &idx2).unwrap();
    let sigma2 = model.nngp.noise_var;
    let d1 = model.train.subset(&idx1);
    let x2 = model.train.inputs.select_rows(&idx2);
    let q = model.kernel.predict_with_noise(&d1, &x2, sigma2).unwrap().latent;
    let mut gap = 0.0;
    for (j, &i) in idx2.iter().enumerate() {
        let y = model.train.targets[(i, 0)];
        let qv = (q.mean[(j, 0)], q.variance[(j, 0)]);
        gap += expected_nll_gaussian(qv, y, sigma2).unwrap() - predictive_nll_gaussian(qv, y, sigma2).unwrap();
    }
    gap /= idx2.len() as f64;
    assert!(gap > 0.0);
    assert!((zero.value - pred.value - gap).abs() < 1e-10);
}

#[test]
fn sparse_optimum_with_all_points_is_exact() {
    let data = regression(25, 2, 0.1, 19);
    let head = RbfParams::new(1.1, 1.3).unwrap();
    let noise = 0.05;
    let x = &data.inputs;
    let k = rbf_kernel(x, x, &head).unwrap();
    let a_inv = add_diag(&k, noise).try_inverse().unwrap();
    let mut set = InducingSet::new(x.clone(), 1).unwrap();
    set.means = &k * &a_inv * &data.targets;
    let s = &k - &k * &a_inv * &k;
    set.set_covariance(0, &(&s + s.transpose()).scale(0.5)).unwrap();
    let mut r = rng(20);
    let xt: DMatrix<f64> = DMatrix::from_fn(10, 2, |_, _| r.random_range(-2.5..2.5));
    let sparse = sparse_posterior(&set, &head, &xt).unwrap();
    let ks = rbf_kernel(x, &xt, &head).unwrap();
    let exact = posterior_predictive(&data, &k, &ks, &DVector::from_element(10, 1.3), noise).unwrap();
    for j in 0..10 {
        assert!((sparse.mean[(j, 0)] - exact.mean[(j, 0)]).abs() < 1e-6);
        assert!((sparse.variance[(j, 0)] - exact.variance[(j, 0)]).abs() < 1e-6);
    }
}

#[test]
fn pretraining_recovers_generating_hyperparameters() {
    let mut r = rng(21);
    let n = 200;
    let x: DMatrix<f64> = DMatrix::from_fn(n, 3, |_, _| r.random_range(-2.0..2.0));
    let params = NngpParams::relu(3, 1.6, 0.2).unwrap();
    let k_raw = nngp_kernel(&x, &x, &params).unwrap();
    let (scale, noise) = (2.5, 0.1);
    let chol = add_diag(&(&k_raw * scale), noise).cholesky().unwrap();
    let z = DMatrix::from_fn(n, 1, |_, _| r.sample::<f64, _>(StandardNormal));
    let y = chol.l() * z;
    let fit = pretrain_nngp(&k_raw, &y, None, 1000, 1.0, 0.02).unwrap();
    assert!(fit.lml_trace.windows(2).all(|w| w[1] >= w[0]));
    let data = Dataset::new(x, y).unwrap();
    let at_fit = log_marginal_likelihood(&data, &(&k_raw * fit.outputscale), fit.noise_var).unwrap();
    let at_truth = log_marginal_likelihood(&data, &(&k_raw * scale), noise).unwrap();
    assert!(at_fit >= at_truth - 1e-9);
    assert!((fit.noise_var / noise - 1.0).abs() < 0.35, "noise {}", fit.noise_var);
    assert!((fit.outputscale / scale).ln().abs() < 0.7, "outputscale {}", fit.outputscale);
}
