//! Perron root and vectors of a truncated kernel.
//!
//! `ρ` is the dominant eigenvalue of `Q`, `u` the left eigenvector (the
//! quasi-stationary distribution, `uᵀ1 = 1`) and `v` the right eigenvector,
//! scaled so that `uᵀv = 1`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{BoundaryPolicy, TruncatedKernel};

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        SpectralOptions {
            tol: 1e-12,
            max_iter: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralTriple {
    pub rho: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// `(‖uᵀQ - ρuᵀ‖∞ / ‖u‖∞, ‖Qv - ρv‖∞ / ‖v‖∞)`.
    pub residuals: (f64, f64),
    pub iterations: usize,
}

/// Right Perron pair only; enough for the Q-process transition matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RightPerron {
    pub rho: f64,
    /// Scaled so that `max v = 1`.
    pub v: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, y| m.max(y.abs()))
}

fn check_rows(q: &TruncatedKernel) -> Result<()> {
    if let Some(i) = q.rows.iter().position(|r| !(r.sum() > 0.0)) {
        return Err(Error::Reducible(format!(
            "state {} has no transition inside 1..={}",
            i + 1,
            q.z_max
        )));
    }
    check_leak_reachable(q)
}

/// Every state must be able to reach a row that leaks mass (extinction or,
/// under the kill policy, loss above `z_max`). Otherwise some closed class
/// never dies out and ρ = 1. This is decided on the graph rather than on the
/// value of ρ, which for large carrying capacities is legitimately within
/// rounding of 1.
fn check_leak_reachable(q: &TruncatedKernel) -> Result<()> {
    let n = q.z_max;
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, row) in q.rows.iter().enumerate() {
        for (j, x) in row.iter() {
            if x > 0.0 {
                preds[j].push(i);
            }
        }
    }
    let mut reaches = vec![false; n];
    let mut stack: Vec<usize> = (0..n)
        .filter(|&i| {
            let leak = q.absorption[i] + if q.policy == BoundaryPolicy::Kill { q.lost_mass[i] } else { 0.0 };
            leak > 0.0 || q.rows[i].sum() < 1.0 - 1e-15
        })
        .collect();
    for &i in &stack {
        reaches[i] = true;
    }
    while let Some(j) = stack.pop() {
        for &i in &preds[j] {
            if !reaches[i] {
                reaches[i] = true;
                stack.push(i);
            }
        }
    }
    match reaches.iter().position(|r| !r) {
        None => Ok(()),
        Some(i) => Err(Error::ModelMisspecification(format!(
            "extinction is unreachable from state {}: the kernel has Perron root 1",
            i + 1
        ))),
    }
}

/// One normalized power step. Returns (ρ estimate, residual).
fn power_step(x: &mut Vec<f64>, y: &mut Vec<f64>, apply: impl Fn(&[f64], &mut [f64])) -> (f64, f64) {
    apply(x, y);
    let rho = max_abs(y);
    if rho == 0.0 {
        return (0.0, f64::INFINITY);
    }
    let mut resid = 0.0f64;
    for (a, b) in x.iter().zip(y.iter()) {
        resid = resid.max((b - rho * a).abs());
    }
    for b in y.iter_mut() {
        *b /= rho;
    }
    std::mem::swap(x, y);
    (rho, resid)
}

/// Power iterations before deciding whether to switch to inverse iteration.
const INVERSE_AFTER: usize = 50;
/// Largest kernel for which the dense shifted system is factorized.
const INVERSE_MAX_STATES: usize = 2000;
const INVERSE_ROUNDS: usize = 200;

/// Whether the power iterations still needed, at the observed contraction
/// rate, cost more than a dense LU factorization.
fn inverse_pays(q: &TruncatedKernel, resid: f64, prev: f64, tol: f64) -> bool {
    let n = q.z_max;
    if n > INVERSE_MAX_STATES || !(resid > tol) || !(prev > 0.0) {
        return false;
    }
    let rate = resid / prev;
    if !(rate > 0.0) {
        return false;
    }
    let remaining = if rate >= 1.0 {
        f64::INFINITY
    } else {
        (tol / resid).ln() / rate.ln()
    };
    remaining * q.nnz() as f64 > (n as f64).powi(3) / 3.0
}

/// Right Perron pair. Starts with power iteration; if that is slow (a small
/// spectral gap) it switches to inverse iteration with a fixed shift just
/// above the Collatz-Wielandt upper bound `max (Qv)_z / v_z ≥ ρ`, which keeps
/// `(σI - Q)^{-1}` non-negative. Each inverse step is followed by a power step
/// so that the residual is always `‖Qv - ρv‖∞`.
pub fn right_perron(q: &TruncatedKernel, options: SpectralOptions, start: Option<&[f64]>) -> Result<RightPerron> {
    check_rows(q)?;
    let n = q.z_max;
    let mut v = match start {
        Some(s) if s.len() == n && s.iter().all(|x| *x > 0.0 && x.is_finite()) => {
            let m = max_abs(s);
            s.iter().map(|x| x / m).collect()
        }
        _ => vec![1.0; n],
    };
    let mut w = vec![0.0; n];
    let mut resid = f64::INFINITY;
    let mut prev = f64::INFINITY;
    let mut lu = None;
    let mut inverse = false;
    let mut inverse_rounds = 0;
    let mut it = 0;
    while it < options.max_iter {
        it += 1;
        if it == INVERSE_AFTER + 1 {
            inverse = inverse_pays(q, resid, prev, options.tol);
        }
        if inverse && inverse_rounds < INVERSE_ROUNDS {
            if lu.is_none() {
                lu = shifted_lu(q, &v, &mut w);
                if lu.is_none() {
                    inverse_rounds = INVERSE_ROUNDS;
                }
            }
            if let Some(lu) = &lu {
                inverse_rounds += 1;
                if !inverse_step(lu, &mut v) {
                    // keep the last good vector and finish by power iteration
                    inverse_rounds = INVERSE_ROUNDS;
                }
            }
        }
        let (rho, r) = power_step(&mut v, &mut w, |x, y| q.mul_right(x, y));
        prev = resid;
        resid = r;
        if resid < options.tol {
            if let Some(i) = v.iter().position(|x| !(*x > 0.0)) {
                return Err(Error::Reducible(format!(
                    "right Perron vector vanishes at state {}",
                    i + 1
                )));
            }
            return Ok(RightPerron {
                rho,
                v,
                residual: resid,
                iterations: it,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: options.max_iter,
        left_residual: f64::NAN,
        right_residual: resid,
    })
}

fn shifted_lu(q: &TruncatedKernel, v: &[f64], w: &mut [f64]) -> Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    if v.iter().any(|x| !(*x > 0.0)) {
        return None;
    }
    q.mul_right(v, w);
    let upper = w.iter().zip(v).map(|(a, b)| a / b).fold(0.0f64, f64::max);
    if !(upper > 0.0) || !upper.is_finite() {
        return None;
    }
    let sigma = upper * (1.0 + 1e-9);
    let mut a = -q.to_dense();
    for i in 0..q.z_max {
        a[(i, i)] += sigma;
    }
    Some(a.lu())
}

/// `v ← (σI - Q)^{-1} v`, max-normalized. False if the result is unusable.
fn inverse_step(lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, v: &mut [f64]) -> bool {
    let Some(y) = lu.solve(&DVector::from_column_slice(v)) else {
        return false;
    };
    let m = y.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if !(m > 0.0) || !m.is_finite() || y.iter().any(|x| *x < -1e-12 * m) {
        return false;
    }
    for (vi, yi) in v.iter_mut().zip(y.iter()) {
        *vi = (yi / m).max(0.0);
    }
    true
}

/// Left and right power iteration from uniform starts.
pub fn spectral(q: &TruncatedKernel, tol: f64, max_iter: usize) -> Result<SpectralTriple> {
    spectral_with(q, SpectralOptions { tol, max_iter })
}

pub fn spectral_with(q: &TruncatedKernel, options: SpectralOptions) -> Result<SpectralTriple> {
    check_rows(q)?;
    let n = q.z_max;
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; n];
    let mut scratch = vec![0.0; n];
    let (mut left, mut right) = (f64::INFINITY, f64::INFINITY);
    let mut iterations = 0;
    while left >= options.tol || right >= options.tol {
        if iterations == options.max_iter {
            return Err(Error::NonConvergence {
                iterations,
                left_residual: left,
                right_residual: right,
            });
        }
        iterations += 1;
        if right >= options.tol {
            right = power_step(&mut v, &mut scratch, |x, y| q.mul_right(x, y)).1;
        }
        if left >= options.tol {
            left = power_step(&mut u, &mut scratch, |x, y| q.mul_left(x, y)).1;
        }
    }
    finish(q, u, v, iterations)
}

/// Normalizes a converged pair and computes ρ and the final residuals.
fn finish(q: &TruncatedKernel, mut u: Vec<f64>, mut v: Vec<f64>, iterations: usize) -> Result<SpectralTriple> {
    let n = q.z_max;
    if u.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::SpectralIntegrity("left Perron vector has negative entries".into()));
    }
    if let Some(i) = v.iter().position(|x| !(*x > 0.0)) {
        return Err(Error::Reducible(format!(
            "right Perron vector vanishes at state {}",
            i + 1
        )));
    }
    let su: f64 = u.iter().sum();
    u.iter_mut().for_each(|x| *x /= su);
    let uv: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().for_each(|x| *x /= uv);

    let mut qv = vec![0.0; n];
    q.mul_right(&v, &mut qv);
    let mut uq = vec![0.0; n];
    q.mul_left(&u, &mut uq);
    let rho: f64 = u.iter().zip(&qv).map(|(a, b)| a * b).sum();
    let right = v
        .iter()
        .zip(&qv)
        .fold(0.0f64, |m, (a, b)| m.max((b - rho * a).abs()))
        / max_abs(&v);
    let left = u
        .iter()
        .zip(&uq)
        .fold(0.0f64, |m, (a, b)| m.max((b - rho * a).abs()))
        / max_abs(&u);
    Ok(SpectralTriple {
        rho,
        u,
        v,
        residuals: (left, right),
        iterations,
    })
}

/// Reference Perron triple from repeated squaring, `Q^(2^s) ~ ρ^(2^s) v uᵀ`.
/// Dense and cubic in `z_max`; meant for checking [`spectral`] on small
/// kernels.
pub fn spectral_oracle(q: &TruncatedKernel) -> Result<SpectralTriple> {
    if q.z_max > 64 {
        return Err(Error::OracleFailure(format!(
            "oracle is limited to 64 states, got {}",
            q.z_max
        )));
    }
    let mut m: DMatrix<f64> = q.to_dense();
    let c0 = m.amax();
    if !(c0 > 0.0) {
        return Err(Error::OracleFailure("zero matrix".into()));
    }
    m /= c0;
    // log ‖Q^(2^s)‖ = log_norm, tracked through the normalizations
    let mut log_norm = c0.ln();
    let mut scale = 1.0f64;
    for _ in 0..40 {
        let sq = &m * &m;
        let c = sq.amax();
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::OracleFailure(
                "matrix power underflowed before reaching rank one".into(),
            ));
        }
        m = sq / c;
        log_norm = 2.0 * log_norm + c.ln();
        scale *= 2.0;
    }
    let rho = (log_norm / scale).exp();

    let v: DVector<f64> = m.column_sum();
    let u: DVector<f64> = m.row_sum().transpose();
    let denom = u.dot(&v);
    if !(denom > 0.0) {
        return Err(Error::OracleFailure("degenerate rank-one limit".into()));
    }
    // a rank-one M equals (M1)(1ᵀM) / (1ᵀM1)
    let err = (&m - &v * u.transpose() / m.sum()).amax();
    if err > 1e-8 {
        return Err(Error::OracleFailure(format!(
            "matrix powers did not reach rank one (deviation {err:e})"
        )));
    }
    let mut u: Vec<f64> = u.iter().copied().collect();
    let mut v: Vec<f64> = v.iter().copied().collect();
    let su: f64 = u.iter().sum();
    u.iter_mut().for_each(|x| *x /= su);
    let uv: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().for_each(|x| *x /= uv);

    let dense = q.to_dense();
    let uq = DVector::from_vec(u.clone()).transpose() * &dense;
    let qv = &dense * DVector::from_vec(v.clone());
    let left = u
        .iter()
        .zip(uq.iter())
        .fold(0.0f64, |acc, (a, b)| acc.max((b - rho * a).abs()))
        / max_abs(&u);
    let right = v
        .iter()
        .zip(qv.iter())
        .fold(0.0f64, |acc, (a, b)| acc.max((b - rho * a).abs()))
        / max_abs(&v);
    Ok(SpectralTriple {
        rho,
        u,
        v,
        residuals: (left, right),
        iterations: 40,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kernel(rows: &[&[f64]]) -> TruncatedKernel {
        let n = rows.len();
        let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        TruncatedKernel::from_dense(&m).unwrap()
    }

    fn random_kernel(rng: &mut ChaCha8Rng, n: usize) -> TruncatedKernel {
        let mut m = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>());
        for i in 0..n {
            let s: f64 = m.row(i).sum();
            let keep = rng.random_range(0.3..0.95);
            for j in 0..n {
                m[(i, j)] *= keep / s;
            }
        }
        TruncatedKernel::from_dense(&m).unwrap()
    }

    #[test]
    fn symmetric_two_state_chain() {
        let q = kernel(&[&[0.5, 0.25], &[0.25, 0.5]]);
        for t in [spectral(&q, 1e-12, 1000).unwrap(), spectral_oracle(&q).unwrap()] {
            assert_abs_diff_eq!(t.rho, 0.75, epsilon = 1e-12);
            assert_abs_diff_eq!(t.u[0], 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(t.u[1], 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(t.v[0], 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(t.v[1], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn one_by_one() {
        let q = kernel(&[&[0.3]]);
        let t = spectral(&q, 1e-12, 10).unwrap();
        assert_abs_diff_eq!(t.rho, 0.3, epsilon = 1e-15);
        assert_eq!(t.u, vec![1.0]);
        assert_abs_diff_eq!(t.v[0], 1.0, epsilon = 1e-15);
        let o = spectral_oracle(&q).unwrap();
        assert_abs_diff_eq!(o.rho, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn random_matrices_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let q = random_kernel(&mut rng, 6);
            let a = spectral(&q, 1e-13, 10_000).unwrap();
            let b = spectral_oracle(&q).unwrap();
            assert_abs_diff_eq!(a.rho, b.rho, epsilon = 1e-10);
            for i in 0..6 {
                assert_abs_diff_eq!(a.u[i], b.u[i], epsilon = 1e-10);
                assert_abs_diff_eq!(a.v[i], b.v[i], epsilon = 1e-10);
            }
            assert_abs_diff_eq!(a.u.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn slow_mixing_uses_inverse_iteration() {
        // two weakly coupled blocks: a small spectral gap
        let n = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = DMatrix::from_fn(n, n, |i, j| {
            let same = (i < n / 2) == (j < n / 2);
            rng.random::<f64>() * if same { 1.0 } else { 1e-4 }
        });
        for i in 0..n {
            let s: f64 = m.row(i).sum();
            let keep = if i < n / 2 { 0.97 } else { 0.96 };
            for j in 0..n {
                m[(i, j)] *= keep / s;
            }
        }
        let q = TruncatedKernel::from_dense(&m).unwrap();
        let right = right_perron(&q, SpectralOptions::default(), None).unwrap();
        assert!(right.iterations < 200, "{} iterations", right.iterations);
        let oracle = spectral_oracle(&q).unwrap();
        assert_abs_diff_eq!(right.rho, oracle.rho, epsilon = 1e-10);
        let top = oracle.v.iter().cloned().fold(0.0, f64::max);
        for (a, b) in right.v.iter().zip(&oracle.v) {
            assert_abs_diff_eq!(*a, b / top, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_row_is_reducible() {
        let q = kernel(&[&[0.5, 0.2], &[0.0, 0.0]]);
        assert!(matches!(spectral(&q, 1e-12, 100), Err(Error::Reducible(_))));
    }

    #[test]
    fn stochastic_kernel_is_misspecified() {
        let q = kernel(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(spectral(&q, 1e-12, 100), Err(Error::ModelMisspecification(_))));
    }

    #[test]
    fn non_convergence_reports_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_kernel(&mut rng, 8);
        match spectral(&q, 1e-14, 1) {
            Err(Error::NonConvergence { iterations, right_residual, .. }) => {
                assert_eq!(iterations, 1);
                assert!(right_residual > 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn right_only_and_warm_start_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_kernel(&mut rng, 8);
        let full = spectral(&q, 1e-13, 10_000).unwrap();
        let cold = right_perron(&q, SpectralOptions::default(), None).unwrap();
        let warm = right_perron(&q, SpectralOptions::default(), Some(&full.v)).unwrap();
        assert!(warm.iterations <= 2);
        let scale = full.v[0] / cold.v[0];
        for i in 0..8 {
            assert_abs_diff_eq!(cold.v[i] * scale, full.v[i], epsilon = 1e-10);
        }
        assert_abs_diff_eq!(cold.rho, full.rho, epsilon = 1e-11);
    }
}
