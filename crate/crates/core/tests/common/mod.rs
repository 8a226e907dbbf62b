#![allow(dead_code)]

use gdkl::gp::Dataset;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Smooth 1-output regression problem on `[-2, 2]^d`.
pub fn regression(n: usize, d: usize, noise: f64, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let x: DMatrix<f64> = DMatrix::from_fn(n, d, |_, _| r.random_range(-2.0..2.0));
    let y = DMatrix::from_fn(n, 1, |i, _| {
        let s: f64 = (0..d).map(|j| (1.3 * x[(i, j)] + j as f64).sin()).sum();
        let e: f64 = r.sample(StandardNormal);
        s + noise * e
    });
    Dataset::new(x, y).unwrap()
}

/// `|a − b| / (max(|a|, |b|) + floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()) + floor)
}

/// Central difference of `f` along coordinate `i`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] = x[i] + h;
    let up = f(&p);
    p[i] = x[i] - h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}
