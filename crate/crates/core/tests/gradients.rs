//! Finite-difference checks of every differentiable loss.

mod common;

use common::{central_difference, regression, rel_err, rng};
use gdkl::sparse::{svgp_elbo, sparse_gdkl_loss_split, InducingSet, SparseGdklModel};
use gdkl::train::{dkl_loss, objective_loss, DeepKernel, GdklModel, LossEval, Objective, TrainConfig};
use gdkl::kernels::RbfParams;
use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;

const PROBES: usize = 20;
const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
// Scaled by max(1, |loss|): keeps exactly-zero gradients (translation-invariant
// output biases, dead units) from being judged against finite-difference
// roundoff.
const FLOOR: f64 = 1e-5;

fn config() -> TrainConfig {
    TrainConfig {
        hidden: vec![8, 8, 3],
        pretrain_steps: 100,
        total_steps: 0,
        ..TrainConfig::default()
    }
}

/// Checks `PROBES` coordinates: the `forced` ones plus random others.
fn probe(
    params: &[f64],
    grad: &[f64],
    f: &mut dyn FnMut(&[f64]) -> f64,
    forced: &[usize],
    seed: u64,
) -> f64 {
    let n = params.len();
    let floor = FLOOR * f(params).abs().max(1.0);
    let mut r = rng(seed);
    let mut coords = forced.to_vec();
    while coords.len() < PROBES {
        let i = r.random_range(0..n);
        if !coords.contains(&i) {
            coords.push(i);
        }
    }
    let mut worst: f64 = 0.0;
    for i in coords {
        let fd = central_difference(f, params, i, STEP);
        let e = rel_err(fd, grad[i], floor);
        assert!(e <= TOLERANCE, "coordinate {i}: finite difference {fd:e}, analytic {:e}", grad[i]);
        worst = worst.max(e);
    }
    println!("worst relative error {worst:.2e} (floor {floor:.1e})");
    worst
}

/// Moves network weights off their initialization so no point sits on a
/// ReLU kink (biases start at exactly zero).
fn jitter_network(params: &mut [f64], net: usize, seed: u64) {
    let mut r = rng(seed);
    for v in &mut params[..net] {
        *v += r.random_range(-0.05..0.05);
    }
}

fn check_objective(objective: Objective, beta: f64, seed: u64) {
    let data = regression(24, 3, 0.1, seed);
    let mut model = GdklModel::init(&config(), data).unwrap();
    let mut r = rng(seed + 100);
    let perm = sample(&mut r, 24, 24).into_vec();
    let (idx1, idx2) = perm.split_at(13);
    // move hyperparameters off their defaults
    let mut params = model.kernel.parameters();
    let n = params.len();
    jitter_network(&mut params, n - 3, seed + 200);
    params[n - 3] += r.random_range(-0.5..0.5);
    params[n - 1] += 1.5;
    model.kernel.set_parameters(&params).unwrap();
    let LossEval { grad, .. } = objective_loss(&mut model, objective, idx1, idx2, beta).unwrap();
    let mut f = |p: &[f64]| {
        model.kernel.set_parameters(p).unwrap();
        objective_loss(&mut model, objective, idx1, idx2, beta).unwrap().value
    };
    probe(&params, &grad, &mut f, &[n - 3, n - 2, n - 1], seed);
}

#[test]
fn gdkl_loss_gradient() {
    check_objective(Objective::Gdkl, 1.0, 1);
    check_objective(Objective::Gdkl, 1.2, 2);
}

#[test]
fn dist_loss_gradient() {
    check_objective(Objective::Dist, 1.0, 3);
}

#[test]
fn pred_loss_gradient() {
    check_objective(Objective::Pred, 1.0, 4);
}

#[test]
fn dkl_marginal_likelihood_gradient() {
    let data = regression(20, 3, 0.1, 5);
    let mut kernel = DeepKernel::init(3, &config(), &mut rng(5)).unwrap();
    let mut params = kernel.parameters();
    let net = params.len() - 3;
    jitter_network(&mut params, net, 205);
    kernel.set_parameters(&params).unwrap();
    let grad = dkl_loss(&mut kernel, &data).unwrap().grad;
    let mut f = |p: &[f64]| {
        kernel.set_parameters(p).unwrap();
        dkl_loss(&mut kernel, &data).unwrap().value
    };
    let n = params.len();
    probe(&params, &grad, &mut f, &[n - 3, n - 2, n - 1], 5);
}

fn perturbed_inducing(set: &mut InducingSet, seed: u64) {
    let mut r = rng(seed);
    let mut p = set.parameters();
    for v in p.iter_mut() {
        *v += r.random_range(-0.3..0.3);
    }
    set.set_parameters(&p).unwrap();
}

#[test]
fn sparse_loss_gradient() {
    let data = regression(20, 3, 0.1, 6);
    let mut model = SparseGdklModel::init(&config(), data, 5).unwrap();
    perturbed_inducing(&mut model.inducing, 6);
    let mut kp = model.kernel.parameters();
    let net = kp.len() - 3;
    jitter_network(&mut kp, net, 206);
    model.kernel.set_parameters(&kp).unwrap();
    let b1: Vec<usize> = (0..8).collect();
    let b2: Vec<usize> = (8..17).collect();
    let params = model.parameters();
    let grad = sparse_gdkl_loss_split(&mut model, &b1, &b2, 1.0).unwrap().grad;
    let k = model.kernel.num_parameters();
    let z = model.inducing.z.len();
    let means = model.inducing.means.len();
    let forced = [k - 3, k - 2, k - 1, k, k + z - 1, k + z, k + z + means, params.len() - 1];
    let mut f = |p: &[f64]| {
        model.set_parameters(p).unwrap();
        sparse_gdkl_loss_split(&mut model, &b1, &b2, 1.0).unwrap().value
    };
    probe(&params, &grad, &mut f, &forced, 6);
}

#[test]
fn variational_elbo_gradient() {
    let mut r = rng(7);
    let phi: DMatrix<f64> = DMatrix::from_fn(15, 2, |_, _| r.random_range(-1.5..1.5));
    let y = DMatrix::from_fn(15, 1, |i, _| phi[(i, 0)].sin());
    let head = RbfParams::new(0.9, 1.3).unwrap();
    let mut set = InducingSet::new(phi.rows(0, 6).clone_owned(), 1).unwrap();
    perturbed_inducing(&mut set, 7);
    set.z = phi.rows(0, 6).clone_owned();
    let params = set.parameters();
    let (_, grad) = svgp_elbo(&set, &head, &phi, &y, 0.1).unwrap();
    let z = set.z.len();
    let mut f = |p: &[f64]| {
        let mut p = p.to_vec();
        p[..z].copy_from_slice(&params[..z]);
        set.set_parameters(&p).unwrap();
        svgp_elbo(&set, &head, &phi, &y, 0.1).unwrap().0
    };
    let forced: Vec<usize> = (z..z + 6).collect();
    let mut coords_ok = grad.clone();
    coords_ok[..z].iter_mut().for_each(|g| *g = 0.0);
    probe(&params, &coords_ok, &mut f, &forced, 7);
}
