//! Self-checks run by `gdkl verify`: every closed form is compared with an
//! independent numerical route.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::gp::{log_marginal_likelihood, posterior_predictive, Dataset};
use crate::kernels::{mc_expectation, relu_expectation, rbf_kernel, ActivationFn, RbfParams};
use crate::objectives::{expected_nll_gaussian, kl_gaussians};
use crate::train::{gdkl_loss, stream_rng, GdklModel, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn normal_ln_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

fn conditioning() -> Result<Check> {
    let x = DMatrix::from_column_slice(4, 1, &[-0.7, 0.1, 0.9, 0.4]);
    let params = RbfParams::new(0.8, 1.3)?;
    let noise = 0.05;
    let full = rbf_kernel(&x, &x, &params)?;
    let y = DMatrix::from_column_slice(3, 1, &[0.3, -0.5, 1.1]);
    let train = Dataset::new(x.rows(0, 3).clone_owned(), y.clone())?;
    let k = full.view((0, 0), (3, 3)).clone_owned();
    let ks = full.view((0, 3), (3, 1)).clone_owned();
    let kss = DVector::from_element(1, full[(3, 3)]);
    let post = posterior_predictive(&train, &k, &ks, &kss, noise)?;

    let mut a = k.clone();
    for i in 0..3 {
        a[(i, i)] += noise;
    }
    let inv = a.try_inverse().expect("positive definite");
    let mean = (ks.transpose() * &inv * &y)[(0, 0)];
    let var = full[(3, 3)] - (ks.transpose() * &inv * &ks)[(0, 0)];
    let err = (post.mean[(0, 0)] - mean).abs().max((post.variance[(0, 0)] - var).abs());
    Ok(check("posterior matches joint-Gaussian conditioning", err < 1e-8, format!("max error {err:.2e}")))
}

fn kl_quadrature() -> Result<Check> {
    let cases = [((0.3, 0.5), (-0.2, 1.7)), ((1.0, 2.0), (1.0, 2.0)), ((-1.5, 0.2), (0.4, 0.9))];
    let mut worst = 0.0f64;
    for (q, p) in cases {
        let closed = kl_gaussians(q, p)?;
        let (lo, hi) = (q.0 - 12.0 * q.1.sqrt(), q.0 + 12.0 * q.1.sqrt());
        let steps = 20_000;
        let h = (hi - lo) / steps as f64;
        let mut sum = 0.0;
        for i in 0..=steps {
            let x = lo + i as f64 * h;
            let lq = normal_ln_pdf(x, q.0, q.1);
            let w = if i == 0 || i == steps { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            sum += w * lq.exp() * (lq - normal_ln_pdf(x, p.0, p.1));
        }
        worst = worst.max((closed - sum * h / 3.0).abs());
    }
    Ok(check("KL matches quadrature", worst < 1e-6, format!("max error {worst:.2e}")))
}

fn ell_monte_carlo<R: Rng>(rng: &mut R) -> Result<Check> {
    let (m, v, y, noise) = (0.4, 0.3, -0.2, 0.1);
    let closed = expected_nll_gaussian((m, v), y, noise)?;
    let n = 200_000;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let z: f64 = rng.sample(StandardNormal);
        let val = -normal_ln_pdf(y, m + v.sqrt() * z, noise);
        s += val;
        s2 += val * val;
    }
    let mean = s / n as f64;
    let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
    let z = (closed - mean).abs() / se;
    Ok(check("expected NLL matches Monte Carlo", z < 3.0, format!("{z:.2} standard errors")))
}

fn lml_density() -> Result<Check> {
    let x = DMatrix::from_column_slice(3, 1, &[0.0, 0.5, 1.7]);
    let y = DMatrix::from_column_slice(3, 1, &[0.2, 0.1, -0.4]);
    let k = rbf_kernel(&x, &x, &RbfParams::new(1.1, 0.9)?)?;
    let noise = 0.2;
    let lml = log_marginal_likelihood(&Dataset::new(x, y.clone())?, &k, noise)?;
    let mut a = k;
    for i in 0..3 {
        a[(i, i)] += noise;
    }
    let det = a.determinant();
    let quad = (y.transpose() * a.try_inverse().expect("positive definite") * &y)[(0, 0)];
    let direct = -0.5 * (quad + det.ln() + 3.0 * (2.0 * std::f64::consts::PI).ln());
    let err = (lml - direct).abs();
    Ok(check("LML matches direct density", err < 1e-8, format!("error {err:.2e}")))
}

fn relu_grid<R: Rng>(rng: &mut R) -> Result<Check> {
    let mut worst = 0.0f64;
    for (kxx, kyy) in [(1.0f64, 1.0f64), (0.5, 2.0)] {
        for rho in [-0.9, -0.3, 0.0, 0.5, 0.95] {
            let kxy = rho * (kxx * kyy).sqrt();
            let closed = relu_expectation(kxx, kxy, kyy)?;
            let mc = mc_expectation(kxx, kxy, kyy, ActivationFn::Relu, 100_000, rng)?;
            worst = worst.max((closed - mc.mean).abs() / mc.std_error.max(1e-300));
        }
    }
    Ok(check("ReLU expectation matches Monte Carlo", worst < 3.0, format!("max {worst:.2} standard errors")))
}

fn gdkl_gradient<R: Rng>(rng: &mut R) -> Result<Check> {
    let n = 12;
    let x: DMatrix<f64> = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
    let y = DMatrix::from_fn(n, 1, |i, _| (2.0 * x[(i, 0)]).sin() + x[(i, 1)]);
    let config = TrainConfig {
        hidden: vec![8, 8, 3],
        pretrain_steps: 0,
        ..TrainConfig::default()
    };
    let mut model = GdklModel::init(&config, Dataset::new(x, y)?)?;
    let idx1: Vec<usize> = (0..6).collect();
    let idx2: Vec<usize> = (6..n).collect();
    // Off the initialization: zero biases can leave points exactly on a ReLU kink.
    let mut base = model.kernel.parameters();
    let net = base.len() - 3;
    for v in &mut base[..net] {
        *v += rng.random_range(-0.05..0.05);
    }
    model.kernel.set_parameters(&base)?;
    let eval = gdkl_loss(&mut model, &idx1, &idx2, 1.0)?;
    let floor = 1e-5 * eval.value.abs().max(1.0);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let i = rng.random_range(0..base.len());
        let mut p = base.clone();
        p[i] += h;
        model.kernel.set_parameters(&p)?;
        let up = gdkl_loss(&mut model, &idx1, &idx2, 1.0)?.value;
        p[i] -= 2.0 * h;
        model.kernel.set_parameters(&p)?;
        let down = gdkl_loss(&mut model, &idx1, &idx2, 1.0)?.value;
        let fd = (up - down) / (2.0 * h);
        let an = eval.grad[i];
        worst = worst.max((fd - an).abs() / (fd.abs().max(an.abs()) + floor));
    }
    model.kernel.set_parameters(&base)?;
    Ok(check("GDKL gradient matches finite differences", worst < 1e-4, format!("max relative error {worst:.2e}")))
}

/// Runs every self-check; a check that errors is reported as failed.
pub fn run_all(seed: u64) -> Vec<Check> {
    let mut rng = stream_rng(seed, 0);
    let results: Vec<(&'static str, Result<Check>)> = vec![
        ("conditioning", conditioning()),
        ("kl", kl_quadrature()),
        ("ell", ell_monte_carlo(&mut rng)),
        ("lml", lml_density()),
        ("relu", relu_grid(&mut rng)),
        ("gradient", gdkl_gradient(&mut rng)),
    ];
    results
        .into_iter()
        .map(|(name, r)| r.unwrap_or_else(|e| check(name, false, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run_all(7) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
