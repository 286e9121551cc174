//! The Q-process: the chain conditioned on never going extinct.
//!
//! Its transition matrix is `Q↑_ij = Q_ij v_j / (ρ v_i)` with stationary law
//! `u_z v_z`. From it come the conditioned mean `m↑(z)` and variance `σ²↑(z)`
//! that the estimators target.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kernel::{build_kernel, KernelOptions, KernelRow, TruncatedKernel};
use crate::model::{OffspringModel, Theta};
use crate::spectral::{right_perron, spectral_with, SpectralOptions, SpectralTriple};

#[derive(Clone, Debug, PartialEq)]
pub struct QProcess {
    /// Rows of `Q↑`, on the same sparsity pattern as `Q`.
    pub q_up: Vec<KernelRow>,
    /// `u_z v_z`.
    pub stationary: Vec<f64>,
    pub spectral: SpectralTriple,
}

impl QProcess {
    pub fn z_max(&self) -> usize {
        self.q_up.len()
    }

    /// `m↑(z) = (1/z) Σ_k k Q↑_zk`, for `1 ≤ z ≤ z_max`.
    pub fn m_up(&self, z: usize) -> f64 {
        row_moments(&self.q_up[z - 1], z).0
    }

    /// `σ²↑(z) = (1/z²) Σ_k k² Q↑_zk - m↑(z)²`.
    pub fn sigma2_up(&self, z: usize) -> f64 {
        row_moments(&self.q_up[z - 1], z).1
    }

    pub fn m_up_all(&self) -> Vec<f64> {
        (1..=self.z_max()).map(|z| self.m_up(z)).collect()
    }

    pub fn sigma2_up_all(&self) -> Vec<f64> {
        (1..=self.z_max()).map(|z| self.sigma2_up(z)).collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.z_max();
        let mut m = DMatrix::zeros(n, n);
        for (i, row) in self.q_up.iter().enumerate() {
            for (j, x) in row.iter() {
                m[(i, j)] = x;
            }
        }
        m
    }
}

/// `(m↑, σ²↑)` of one conditioned row leaving state `z`.
fn row_moments(row: &KernelRow, z: usize) -> (f64, f64) {
    let (mut m1, mut m2) = (0.0, 0.0);
    for (j, p) in row.iter() {
        let k = (j + 1) as f64;
        m1 += k * p;
        m2 += k * k * p;
    }
    let zf = z as f64;
    let m = m1 / zf;
    (m, m2 / (zf * zf) - m * m)
}

fn conditioned_rows(q: &TruncatedKernel, rho: f64, v: &[f64]) -> Result<Vec<KernelRow>> {
    if let Some(i) = v.iter().position(|x| !(*x > 0.0)) {
        return Err(Error::SpectralIntegrity(format!(
            "right Perron vector is not positive at state {}",
            i + 1
        )));
    }
    Ok(q
        .rows
        .iter()
        .zip(v)
        .map(|(row, &vi)| KernelRow {
            start: row.start,
            values: row
                .iter()
                .map(|(j, x)| x * v[j] / (rho * vi))
                .collect(),
        })
        .collect())
}

/// Builds the Q-process from a kernel and its Perron triple.
pub fn q_transition(spectral: &SpectralTriple, q: &TruncatedKernel) -> Result<QProcess> {
    let q_up = conditioned_rows(q, spectral.rho, &spectral.v)?;
    let stationary = spectral.u.iter().zip(&spectral.v).map(|(a, b)| a * b).collect();
    Ok(QProcess {
        q_up,
        stationary,
        spectral: spectral.clone(),
    })
}

/// Numerical settings shared by every `m↑` computation.
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct CurveOptions {
    pub kernel: KernelOptions,
    pub spectral: SpectralOptions,
}

/// Full Q-process at θ.
pub fn q_process(model: &OffspringModel, theta: &Theta, z_max: usize, options: CurveOptions) -> Result<QProcess> {
    let q = build_kernel(model, theta, z_max, options.kernel)?;
    let triple = spectral_with(&q, options.spectral)?;
    q_transition(&triple, &q)
}

/// `m↑(z, θ)` for `z = 1..=z_max` from the right Perron pair alone.
fn curve_from_right(
    model: &OffspringModel,
    theta: &Theta,
    z_max: usize,
    options: CurveOptions,
) -> Result<Vec<f64>> {
    let q = build_kernel(model, theta, z_max, options.kernel)?;
    let right = right_perron(&q, options.spectral, None)?;
    let rows = conditioned_rows(&q, right.rho, &right.v)?;
    let curve = rows
        .iter()
        .enumerate()
        .map(|(i, r)| row_moments(r, i + 1).0)
        .collect();
    Ok(curve)
}

/// `m↑(z, θ)` for `z = 1..=z_max`, uncached.
pub fn m_up_curve(model: &OffspringModel, theta: &Theta, z_max: usize) -> Result<Vec<f64>> {
    curve_from_right(model, theta, z_max, CurveOptions::default())
}

fn theta_key(theta: &Theta) -> String {
    theta
        .as_slice()
        .iter()
        .map(|x| format!("{x:.11e}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Memoized `θ ↦ m↑(·, θ)` for one model and truncation level.
///
/// Results are keyed on θ rounded to 12 significant digits. The store is
/// shared, so concurrent optimizer runs reuse each other's solves.
pub struct MupEvaluator {
    pub model: OffspringModel,
    pub z_max: usize,
    pub options: CurveOptions,
    cache: Mutex<HashMap<String, Arc<Vec<f64>>>>,
}

impl MupEvaluator {
    pub fn new(model: OffspringModel, z_max: usize, options: CurveOptions) -> Self {
        MupEvaluator {
            model,
            z_max,
            options,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn curve(&self, theta: &Theta) -> Result<Arc<Vec<f64>>> {
        let key = theta_key(theta);
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let curve = Arc::new(curve_from_right(&self.model, theta, self.z_max, self.options)?);
        self.cache.lock().unwrap().insert(key, curve.clone());
        Ok(curve)
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().unwrap().len()
    }
}

/// Default finite-difference step `h_j = max(1e-4 |θ_j|, 1e-6)`.
pub fn default_steps(theta: &Theta) -> Vec<f64> {
    theta.as_slice().iter().map(|x| (1e-4 * x.abs()).max(1e-6)).collect()
}

/// Central-difference gradient of `m↑(z, θ)` in θ: a `z_max × d` matrix.
pub fn grad_m_up(
    model: &OffspringModel,
    theta: &Theta,
    z_max: usize,
    h: &[f64],
    options: CurveOptions,
) -> Result<DMatrix<f64>> {
    let d = theta.len();
    if h.len() != d {
        return Err(Error::Domain(format!("expected {d} step sizes, got {}", h.len())));
    }
    let mut grad = DMatrix::zeros(z_max, d);
    for j in 0..d {
        let plus = theta.shifted(j, h[j]);
        let minus = theta.shifted(j, -h[j]);
        for t in [&plus, &minus] {
            model.validate(t).map_err(|e| {
                Error::Domain(format!("finite-difference point leaves the parameter space: {e}"))
            })?;
        }
        let up = curve_from_right(model, &plus, z_max, options)?;
        let down = curve_from_right(model, &minus, z_max, options)?;
        for z in 0..z_max {
            grad[(z, j)] = (up[z] - down[z]) / (2.0 * h[j]);
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BaseSpec, Family};
    use crate::spectral::spectral;
    use approx::assert_abs_diff_eq;

    fn two_state() -> (TruncatedKernel, SpectralTriple) {
        let q = TruncatedKernel::from_dense(&DMatrix::from_row_slice(2, 2, &[0.5, 0.25, 0.25, 0.5])).unwrap();
        let t = spectral(&q, 1e-13, 1000).unwrap();
        (q, t)
    }

    #[test]
    fn two_state_chain() {
        let (q, t) = two_state();
        let qp = q_transition(&t, &q).unwrap();
        let d = qp.to_dense();
        assert_abs_diff_eq!(d[(0, 0)], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[(0, 1)], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[(1, 0)], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(qp.stationary[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(qp.m_up(1), 4.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(qp.m_up(2), 5.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(qp.sigma2_up(1), 2.0 / 9.0, epsilon = 1e-12);
        // one step of the stationary chain preserves its mean
        let lhs: f64 = (1..=2).map(|z| qp.stationary[z - 1] * z as f64 * qp.m_up(z)).sum();
        let rhs: f64 = (1..=2).map(|z| qp.stationary[z - 1] * z as f64).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
    }

    #[test]
    fn one_by_one() {
        let q = TruncatedKernel::from_dense(&DMatrix::from_element(1, 1, 0.4)).unwrap();
        let t = spectral(&q, 1e-13, 10).unwrap();
        let qp = q_transition(&t, &q).unwrap();
        assert_abs_diff_eq!(qp.q_up[0].values[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(qp.stationary[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn nonpositive_v_is_rejected() {
        let (q, mut t) = two_state();
        t.v[1] = 0.0;
        assert!(matches!(q_transition(&t, &q), Err(Error::SpectralIntegrity(_))));
    }

    #[test]
    fn geometric_bh_q_process() {
        let model = OffspringModel::geometric(Family::BevertonHolt);
        let theta = Theta(vec![40.0, 2.0]);
        let qp = q_process(&model, &theta, 320, CurveOptions::default()).unwrap();
        for row in &qp.q_up {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-10);
        }
        assert_abs_diff_eq!(qp.stationary.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
        let argmax = qp
            .stationary
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0
            + 1;
        assert!((30..=50).contains(&argmax), "argmax {argmax}");
        // conditioning lifts the mean, most at small z
        let mut last_gap = f64::INFINITY;
        for z in 1..=10 {
            let gap = qp.m_up(z) - model.offspring_mean(z as u64, &theta).unwrap();
            assert!(gap > 0.0 && gap < last_gap, "z={z} gap={gap}");
            last_gap = gap;
        }
        let fast = m_up_curve(&model, &theta, 320).unwrap();
        for z in 1..=320 {
            assert_abs_diff_eq!(fast[z - 1], qp.m_up(z), epsilon = 1e-9);
        }
    }

    #[test]
    fn ricker_lifted_at_capacity() {
        let model = OffspringModel::geometric(Family::Ricker);
        let curve = m_up_curve(&model, &Theta(vec![40.0, 2.0]), 320).unwrap();
        assert!(curve[39] > 1.0);
    }

    #[test]
    fn unit_offspring_is_misspecified() {
        let model = OffspringModel::new(Family::BevertonHolt, BaseSpec::Empirical { pmf: vec![0.0, 1.0] }).unwrap();
        assert!(matches!(
            m_up_curve(&model, &Theta(vec![10.0]), 30),
            Err(Error::ModelMisspecification(_))
        ));
    }

    #[test]
    fn truncation_stability() {
        let model = OffspringModel::geometric(Family::BevertonHolt);
        let theta = Theta(vec![20.0, 2.0]);
        let small = q_process(&model, &theta, 160, CurveOptions::default()).unwrap();
        let large = q_process(&model, &theta, 240, CurveOptions::default()).unwrap();
        assert!(small.spectral.residuals.0 < 1e-12);
        assert_abs_diff_eq!(small.spectral.rho, large.spectral.rho, epsilon = 2e-12);
    }

    #[test]
    fn evaluator_caches() {
        let model = OffspringModel::bh_binary();
        let ev = MupEvaluator::new(model.clone(), 200, CurveOptions::default());
        let a = ev.curve(&Theta(vec![25.0, 0.6])).unwrap();
        let b = ev.curve(&Theta(vec![25.2, 0.61])).unwrap();
        let again = ev.curve(&Theta(vec![25.0 * (1.0 + 1e-14), 0.6])).unwrap();
        assert!(Arc::ptr_eq(&a, &again));
        assert_eq!(ev.cached(), 2);
        let cold = m_up_curve(&model, &Theta(vec![25.2, 0.61]), 200).unwrap();
        for (x, y) in b.iter().zip(&cold) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn gradient_step_halving() {
        let model = OffspringModel::bh_binary();
        let theta = Theta(vec![30.0, 0.6]);
        let o = CurveOptions::default();
        let g1 = grad_m_up(&model, &theta, 150, &[0.4, 0.004], o).unwrap();
        let g2 = grad_m_up(&model, &theta, 150, &[0.2, 0.002], o).unwrap();
        let g4 = grad_m_up(&model, &theta, 150, &[0.1, 0.001], o).unwrap();
        let (d1, d2) = ((&g1 - &g2).amax(), (&g2 - &g4).amax());
        assert!(d1 / d2 > 3.0 && d1 / d2 < 5.0, "ratio {}", d1 / d2);
        // raising K raises growth near K
        for z in 25..=35 {
            assert!(g2[(z - 1, 0)] > 0.0);
        }
    }

    #[test]
    fn gradient_zero_where_independent() {
        // θ = (K) only and μ = 1 makes r ≡ 1: nothing depends on K
        let model = OffspringModel::new(Family::BevertonHolt, BaseSpec::Empirical { pmf: vec![0.5, 0.0, 0.5] }).unwrap();
        let g = grad_m_up(&model, &Theta(vec![10.0]), 40, &[1e-3], CurveOptions::default()).unwrap();
        assert!(g.amax() < 1e-6);
    }

    #[test]
    fn gradient_domain_error() {
        let model = OffspringModel::bh_binary();
        let r = grad_m_up(&model, &Theta(vec![30.0, 0.9995]), 100, &[0.1, 0.001], CurveOptions::default());
        assert!(matches!(r, Err(Error::Domain(_))));
    }
}
