//! Blocked Cholesky factorization and triangular solves.
//!
//! The trailing updates go through `gemm`, which is where nearly all of the
//! flops land for the matrix sizes used in training (a few hundred rows).

use log::debug;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const BLOCK: usize = 64;

/// Default starting jitter for the retry ladder.
pub const DEFAULT_JITTER: f64 = 1e-8;

/// Number of escalations after the plain attempt: `base * 10^k` for `k = 0..=6`.
const JITTER_STEPS: i32 = 6;

/// Lower Cholesky factor of `K + jitter_used * I`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
    jitter_used: f64,
    block_inverses: Vec<DMatrix<f64>>,
}

impl CholeskyFactor {
    fn new(lower: DMatrix<f64>, jitter_used: f64) -> Self {
        let n = lower.nrows();
        let block_inverses = (0..n)
            .step_by(BLOCK)
            .map(|k| {
                let b = BLOCK.min(n - k);
                lower_triangular_inverse(&lower.view((k, k), (b, b)).clone_owned())
            })
            .collect();
        CholeskyFactor {
            lower,
            jitter_used,
            block_inverses,
        }
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// `L Lᵀ`, i.e. the factored matrix including the jitter.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `L X = B`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        forward_substitute(&self.lower, &self.block_inverses, &mut x);
        x
    }

    /// Solves `Lᵀ X = B`.
    pub fn solve_upper(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        back_substitute_transposed(&self.lower, &self.block_inverses, &mut x);
        x
    }

    /// Solves `(L Lᵀ) X = B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        forward_substitute(&self.lower, &self.block_inverses, &mut x);
        back_substitute_transposed(&self.lower, &self.block_inverses, &mut x);
        x
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        DVector::from_column_slice(self.solve(&m).as_slice())
    }

    /// `(L Lᵀ)⁻¹`, formed as `L⁻ᵀ L⁻¹`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let l_inv = self.solve_lower(&DMatrix::identity(n, n));
        l_inv.transpose() * &l_inv
    }
}

/// Factorizes a symmetric matrix, escalating diagonal jitter `base_jitter * 10^k`
/// (`k = 0..=6`) whenever the plain factorization fails.
pub fn cholesky_with_jitter(k: &DMatrix<f64>, base_jitter: f64) -> Result<CholeskyFactor> {
    let n = k.nrows();
    if k.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "cholesky of a {}x{} matrix",
            n,
            k.ncols()
        )));
    }
    if !(base_jitter > 0.0) {
        return Err(Error::Domain(format!("base jitter must be positive, got {base_jitter}")));
    }
    let scale = k.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for j in 0..n {
        for i in (j + 1)..n {
            if (k[(i, j)] - k[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::Domain(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    k[(i, j)],
                    k[(j, i)]
                )));
            }
        }
    }

    if let Some(lower) = factor(k.clone()) {
        return Ok(CholeskyFactor::new(lower, 0.0));
    }
    let mut jitter = base_jitter;
    for step in 0..=JITTER_STEPS {
        jitter = base_jitter * 10f64.powi(step);
        let mut a = k.clone();
        for i in 0..n {
            a[(i, i)] += jitter;
        }
        if let Some(lower) = factor(a) {
            debug!("cholesky needed jitter {jitter:e} on a {n}x{n} matrix");
            return Ok(CholeskyFactor::new(lower, jitter));
        }
    }
    Err(Error::NotPositiveDefinite { jitter })
}

/// In-place right-looking blocked factorization; the strict upper triangle is
/// zeroed on success.
fn factor(mut a: DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    if a.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut k = 0;
    while k < n {
        let b = BLOCK.min(n - k);
        {
            let data = a.as_mut_slice();
            // Diagonal block and panel together, left-looking within the block.
            for j in k..k + b {
                let (left, right) = data.split_at_mut(j * n);
                let col_j = &mut right[..n];
                for p in k..j {
                    let col_p = &left[p * n..p * n + n];
                    let l = col_p[j];
                    if l != 0.0 {
                        axpy(-l, &col_p[j..], &mut col_j[j..]);
                    }
                }
                let d = col_j[j];
                if !(d > 0.0) || !d.is_finite() {
                    return None;
                }
                let d = d.sqrt();
                col_j[j] = d;
                let inv = 1.0 / d;
                for v in &mut col_j[j + 1..] {
                    *v *= inv;
                }
            }
        }
        let rest = n - k - b;
        if rest > 0 {
            let panel = a.view((k + b, k), (rest, b)).clone_owned();
            a.view_mut((k + b, k + b), (rest, rest))
                .gemm(-1.0, &panel, &panel.transpose(), 1.0);
        }
        k += b;
    }
    a.fill_upper_triangle(0.0, 1);
    Some(a)
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Inverse of a small lower-triangular block by column-wise forward substitution.
fn lower_triangular_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let b = l.nrows();
    let ld = l.as_slice();
    let mut inv = DMatrix::<f64>::identity(b, b);
    for col in inv.as_mut_slice().chunks_exact_mut(b) {
        for p in 0..b {
            let l_col = &ld[p * b..(p + 1) * b];
            let xp = col[p] / l_col[p];
            col[p] = xp;
            if xp != 0.0 {
                axpy(-xp, &l_col[p + 1..], &mut col[p + 1..]);
            }
        }
    }
    inv
}

/// Solves `L X = B` in place.
fn forward_substitute(l: &DMatrix<f64>, block_inverses: &[DMatrix<f64>], x: &mut DMatrix<f64>) {
    let n = l.nrows();
    let ncols = x.ncols();
    let mut k = 0;
    for inv in block_inverses {
        let b = inv.nrows();
        let mut rhs = x.view((k, 0), (b, ncols)).clone_owned();
        if k > 0 {
            rhs.gemm(-1.0, &l.view((k, 0), (b, k)), &x.view((0, 0), (k, ncols)), 1.0);
        }
        x.view_mut((k, 0), (b, ncols)).gemm(1.0, inv, &rhs, 0.0);
        k += b;
    }
    debug_assert_eq!(k, n);
}

/// Solves `Lᵀ X = B` in place.
fn back_substitute_transposed(l: &DMatrix<f64>, block_inverses: &[DMatrix<f64>], x: &mut DMatrix<f64>) {
    let n = l.nrows();
    let ncols = x.ncols();
    let mut end = n;
    for inv in block_inverses.iter().rev() {
        let b = inv.nrows();
        let k = end - b;
        let mut rhs = x.view((k, 0), (b, ncols)).clone_owned();
        if end < n {
            let lt = l.view((end, k), (n - end, b)).transpose();
            rhs.gemm(-1.0, &lt, &x.view((end, 0), (n - end, ncols)), 1.0);
        }
        x.view_mut((k, 0), (b, ncols)).gemm(1.0, &inv.transpose(), &rhs, 0.0);
        end = k;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let x = DMatrix::from_fn(n, n + 3, |_, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        });
        let mut a = &x * x.transpose();
        for i in 0..n {
            a[(i, i)] += 0.1;
        }
        a
    }

    #[test]
    fn identity_needs_no_jitter() {
        let f = cholesky_with_jitter(&DMatrix::identity(2, 2), 1e-8).unwrap();
        assert_eq!(f.jitter_used(), 0.0);
        assert_eq!(f.lower(), &DMatrix::<f64>::identity(2, 2));
    }

    #[test]
    fn two_by_two_hand_case() {
        let k = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let f = cholesky_with_jitter(&k, 1e-8).unwrap();
        let l = f.lower();
        assert!((l[(0, 0)] - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(l[(0, 1)], 0.0);
        assert!((l[(1, 0)] - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((l[(1, 1)] - 1.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn singular_psd_forces_jitter() {
        let k = DMatrix::from_element(2, 2, 1.0);
        let f = cholesky_with_jitter(&k, 1e-8).unwrap();
        assert!(f.jitter_used() > 0.0);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            cholesky_with_jitter(&k, 1e-8),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn asymmetric_matrix_is_rejected() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(cholesky_with_jitter(&k, 1e-8), Err(Error::Domain(_))));
    }

    #[test]
    fn blocked_paths_reconstruct_and_solve() {
        for &n in &[1usize, 5, 64, 65, 150] {
            let a = random_spd(n, n as u64);
            let f = cholesky_with_jitter(&a, 1e-8).unwrap();
            let rel = (f.reconstruct() - &a).norm() / a.norm();
            assert!(rel < 1e-12, "n={n} rel={rel}");

            let b = DMatrix::from_fn(n, 3, |i, j| (i as f64 * 0.3 + j as f64).sin());
            let x = f.solve(&b);
            assert!((&a * &x - &b).norm() < 1e-8 * b.norm().max(1.0));
            let inv = f.inverse();
            assert!((&a * inv - DMatrix::identity(n, n)).norm() < 1e-8);

            let expected = a.clone().cholesky().unwrap().l();
            assert!((f.lower() - expected).norm() < 1e-10);
        }
    }
}
