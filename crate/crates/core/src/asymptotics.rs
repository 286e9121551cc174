//! Asymptotic covariance of the weighted least-squares estimator.
//!
//! With limiting weights `w_z`, `γ(z) = σ²↑(z) / (u_z v_z)` and gradient
//! `g(z) = ∇_θ m↑(z, θ)`:
//!
//! ```text
//! η = 2 Σ w_z g gᵀ,   ζ = 4 Σ w_z² γ(z) g gᵀ,   β = η⁻¹ ζ η⁻¹
//! ```
//!
//! and `√n (θ̂ - θ)` is approximately `N(0, β)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::WeightScheme;
use crate::model::{OffspringModel, Theta};
use crate::qprocess::{default_steps, grad_m_up, q_process, CurveOptions, QProcess};

/// Smallest `u_z v_z` for which `γ(z)` is reported.
pub const UNDERFLOW: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub theta: Theta,
    pub scheme: WeightScheme,
    pub z_max: usize,
    /// `γ(z)` for `z = 1..=z_max`; `None` where `u_z v_z` is zero or below
    /// [`UNDERFLOW`].
    pub gamma: Vec<Option<f64>>,
    #[serde(with = "rows")]
    pub eta: DMatrix<f64>,
    #[serde(with = "rows")]
    pub zeta: DMatrix<f64>,
    #[serde(with = "rows")]
    pub beta: DMatrix<f64>,
    /// Limiting weights `w_z(θ)` of the scheme.
    pub weight_limit: Vec<f64>,
    /// Weight at the top state, which also carries the mass lumped from above
    /// `z_max`; an estimate of `Σ_{z > z_max} w_z`.
    pub tail_weight: f64,
}

/// Square matrices as arrays of rows.
pub mod rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(D::Error::custom("expected a square matrix"));
        }
        Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }
}

/// Default truncation for covariance computations: `max(4K, 64)`.
pub fn default_z_max(theta: &Theta) -> usize {
    ((4.0 * theta.k()).ceil() as usize).max(64)
}

/// States that no row of `Q↑` can move to. These carry no weight.
fn unreachable(qp: &QProcess) -> Vec<bool> {
    let mut hit = vec![false; qp.z_max()];
    for row in &qp.q_up {
        for (j, x) in row.iter() {
            if x > 0.0 {
                hit[j] = true;
            }
        }
    }
    hit.into_iter().map(|h| !h).collect()
}

/// `γ(z)` from a computed Q-process. Unreachable states give `None`.
pub fn gamma_from(qp: &QProcess) -> Result<Vec<Option<f64>>> {
    let skip = unreachable(qp);
    let sigma2 = qp.sigma2_up_all();
    qp.stationary
        .iter()
        .zip(&sigma2)
        .zip(&skip)
        .enumerate()
        .map(|(i, ((&w, &s2), &skip))| {
            if skip {
                Ok(None)
            } else if w < UNDERFLOW {
                Err(Error::TailTruncation { z: i + 1 })
            } else {
                Ok(Some(s2 / w))
            }
        })
        .collect()
}

/// `γ(z) = σ²↑(z) / (u_z v_z)` for `z = 1..=z_max`.
pub fn gamma_curve(model: &OffspringModel, theta: &Theta, z_max: usize) -> Result<Vec<Option<f64>>> {
    gamma_from(&q_process(model, theta, z_max, CurveOptions::default())?)
}

/// Limiting weights from `u_z v_z`: W1 is `u_z v_z` itself, W2 is
/// `z u_z v_z / Σ_k k u_k v_k`, capped W2 restricts to `z ≤ cap`.
pub fn limit_weights(stationary: &[f64], scheme: WeightScheme) -> Result<Vec<f64>> {
    let cap = match scheme {
        WeightScheme::W1 => return Ok(stationary.to_vec()),
        WeightScheme::W2 => usize::MAX,
        WeightScheme::Capped(c) => c as usize,
    };
    let raw: Vec<f64> = stationary
        .iter()
        .enumerate()
        .map(|(i, w)| if i < cap { (i + 1) as f64 * w } else { 0.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Identifiability("limiting weights vanish".into()));
    }
    Ok(raw.into_iter().map(|x| x / total).collect())
}

/// `η = 2 Σ w_z g gᵀ`, `ζ = 4 Σ c_z g gᵀ` with `c_z = w_z² γ(z)`, and
/// `β = η⁻¹ ζ η⁻¹` by two symmetric solves.
pub fn sandwich(w: &[f64], c: &[f64], grad: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let d = grad.ncols();
    if w.len() != grad.nrows() || c.len() != grad.nrows() {
        return Err(Error::Domain("weights and gradient have different lengths".into()));
    }
    let mut eta = DMatrix::zeros(d, d);
    let mut zeta = DMatrix::zeros(d, d);
    for z in 0..grad.nrows() {
        if w[z] == 0.0 && c[z] == 0.0 {
            continue;
        }
        let g = grad.row(z).transpose();
        let outer = &g * g.transpose();
        eta += outer.scale(2.0 * w[z]);
        zeta += outer.scale(4.0 * c[z]);
    }
    let scale = eta.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let smallest = eta.clone().symmetric_eigenvalues().min();
    if !(scale > 0.0) || smallest <= 1e-10 * scale {
        return Err(Error::Identifiability(format!(
            "η is singular (smallest eigenvalue {smallest:e}, scale {scale:e})"
        )));
    }
    let chol = eta
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Identifiability("η is not positive definite".into()))?;
    let x = chol.solve(&zeta);
    let beta = chol.solve(&x.transpose());
    let beta = (&beta + beta.transpose()).scale(0.5);
    Ok((eta, zeta, beta))
}

/// Covariance report at θ, typically θ₀ or a plug-in estimate.
pub fn covariance(
    model: &OffspringModel,
    theta: &Theta,
    scheme: WeightScheme,
    z_max: usize,
) -> Result<CovarianceReport> {
    covariance_with(model, theta, scheme, z_max, &default_steps(theta))
}

pub fn covariance_with(
    model: &OffspringModel,
    theta: &Theta,
    scheme: WeightScheme,
    z_max: usize,
    steps: &[f64],
) -> Result<CovarianceReport> {
    let options = CurveOptions::default();
    let qp = q_process(model, theta, z_max, options)?;
    let grad = grad_m_up(model, theta, z_max, steps, options)?;
    let stationary = &qp.stationary;
    let w = limit_weights(stationary, scheme)?;
    let sigma2 = qp.sigma2_up_all();
    // w_z² γ(z) = (w_z / u_z v_z) w_z σ²↑(z); the ratio is 1 under W1 and
    // z / Σ k u_k v_k under W2, so nothing is divided by a vanishing u_z v_z
    let ratio = |i: usize| match scheme {
        WeightScheme::W1 => 1.0,
        WeightScheme::W2 | WeightScheme::Capped(_) => {
            let cap = match scheme {
                WeightScheme::Capped(c) => c as usize,
                _ => z_max,
            };
            let total: f64 = stationary.iter().take(cap).enumerate().map(|(k, s)| (k + 1) as f64 * s).sum();
            (i + 1) as f64 / total
        }
    };
    let c: Vec<f64> = (0..z_max)
        .map(|i| if w[i] == 0.0 { 0.0 } else { ratio(i) * w[i] * sigma2[i] })
        .collect();
    let (eta, zeta, beta) = sandwich(&w, &c, &grad)?;
    let skip = unreachable(&qp);
    let gamma = stationary
        .iter()
        .zip(&sigma2)
        .zip(&skip)
        .map(|((&s, &v), &skip)| (!skip && s >= UNDERFLOW).then(|| v / s))
        .collect();
    Ok(CovarianceReport {
        theta: theta.clone(),
        scheme,
        z_max,
        gamma,
        tail_weight: w[z_max - 1],
        weight_limit: w,
        eta,
        zeta,
        beta,
    })
}

/// Standard normal quantile; Acklam's rational approximation (relative error
/// below 1.2e-9).
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    const LOW: f64 = 0.02425;
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - LOW {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Quantile of χ² with two degrees of freedom (exact).
pub fn chi2_2_quantile(p: f64) -> f64 {
    -2.0 * (1.0 - p).ln()
}

fn check_level(level: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::Domain(format!("confidence level {level} outside [0, 1]")));
    }
    Ok(())
}

/// Marginal intervals `θ̂_j ± q_{(1+level)/2} √(β_jj / n)`.
pub fn confidence_interval(theta_hat: &Theta, beta: &DMatrix<f64>, n: u64, level: f64) -> Result<Vec<(f64, f64)>> {
    check_level(level)?;
    if n == 0 {
        return Err(Error::Domain("sample size must be positive".into()));
    }
    let d = theta_hat.len();
    if beta.nrows() != d || beta.ncols() != d {
        return Err(Error::Domain(format!("β is {}×{}, θ has {d} components", beta.nrows(), beta.ncols())));
    }
    let q = if level == 0.0 { 0.0 } else { normal_quantile(0.5 * (1.0 + level)) };
    (0..d)
        .map(|j| {
            let b = beta[(j, j)];
            if b < -1e-12 || b.is_nan() {
                return Err(Error::CovarianceIntegrity(format!("β[{j}][{j}] = {b}")));
            }
            let half = q * (b.max(0.0) / n as f64).sqrt();
            let half = if half.is_nan() { f64::INFINITY } else { half };
            let t = theta_hat.0[j];
            Ok((t - half, t + half))
        })
        .collect()
}

/// Boundary of the level-`level` confidence ellipse at `points` angles:
/// `(φ, x, y)` with `(x, y) = θ̂ + A (cos φ, sin φ) / √n`, `AAᵀ = χ²₂(level) β`.
pub fn confidence_ellipse(
    theta_hat: &Theta,
    beta: &DMatrix<f64>,
    n: u64,
    level: f64,
    points: usize,
) -> Result<Vec<(f64, f64, f64)>> {
    check_level(level)?;
    if theta_hat.len() != 2 || beta.nrows() != 2 || beta.ncols() != 2 {
        return Err(Error::Domain("confidence ellipses need two parameters".into()));
    }
    if n == 0 || points == 0 {
        return Err(Error::Domain("sample size and point count must be positive".into()));
    }
    let a = beta
        .clone()
        .scale(chi2_2_quantile(level))
        .cholesky()
        .ok_or_else(|| Error::CovarianceIntegrity("β is not positive definite".into()))?
        .l();
    let s = (n as f64).sqrt();
    Ok((0..points)
        .map(|k| {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / points as f64;
            let p = &a * DVector::from_column_slice(&[phi.cos(), phi.sin()]);
            (phi, theta_hat.0[0] + p[0] / s, theta_hat.0[1] + p[1] / s)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::TruncatedKernel;
    use crate::qprocess::q_transition;
    use crate::spectral::spectral;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn two_state() -> QProcess {
        let q = TruncatedKernel::from_dense(&DMatrix::from_row_slice(2, 2, &[0.5, 0.25, 0.25, 0.5])).unwrap();
        q_transition(&spectral(&q, 1e-13, 1000).unwrap(), &q).unwrap()
    }

    #[test]
    fn gamma_two_state() {
        let g = gamma_from(&two_state()).unwrap();
        assert_abs_diff_eq!(g[0].unwrap(), 4.0 / 9.0, epsilon = 1e-10);
    }

    #[test]
    fn deterministic_conditioned_step_has_zero_gamma() {
        // from either state the conditioned chain moves to state 2
        let q = TruncatedKernel::from_dense(&DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.0, 0.5])).unwrap();
        let qp = q_transition(&spectral(&q, 1e-13, 1000).unwrap(), &q).unwrap();
        let g = gamma_from(&qp).unwrap();
        assert_eq!(g[0], None);
        assert_abs_diff_eq!(g[1].unwrap(), 0.0);
    }

    #[test]
    fn scalar_sandwich() {
        let g = DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5]);
        let w = [0.2, 0.5, 0.3];
        let gamma = [3.0, 1.0, 2.0];
        let c: Vec<f64> = w.iter().zip(&gamma).map(|(w, g)| w * w * g).collect();
        let (eta, zeta, beta) = sandwich(&w, &c, &g).unwrap();
        let e = 2.0 * (0.2 * 1.0 + 0.5 * 4.0 + 0.3 * 0.25);
        let z = 4.0 * (0.04 * 3.0 + 0.25 * 4.0 + 0.09 * 2.0 * 0.25);
        assert_relative_eq!(eta[(0, 0)], e, max_relative = 1e-14);
        assert_relative_eq!(zeta[(0, 0)], z, max_relative = 1e-14);
        assert_relative_eq!(beta[(0, 0)], z / (e * e), max_relative = 1e-14);
    }

    #[test]
    fn one_state_cannot_identify_two_parameters() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let r = sandwich(&[1.0, 0.0], &[1.0, 0.0], &g);
        assert!(matches!(r, Err(Error::Identifiability(_))));
    }

    #[test]
    fn quantiles() {
        assert_abs_diff_eq!(normal_quantile(0.975), 1.959963984540054, epsilon = 1e-8);
        assert_abs_diff_eq!(normal_quantile(0.5), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(normal_quantile(0.001), -3.090232306167813, epsilon = 1e-8);
        assert_abs_diff_eq!(normal_quantile(0.9999), 3.719016485455709, epsilon = 1e-8);
        assert_abs_diff_eq!(chi2_2_quantile(0.95), 5.991464547107979, epsilon = 1e-12);
    }

    #[test]
    fn intervals() {
        let beta = DMatrix::identity(1, 1);
        let ci = confidence_interval(&Theta(vec![3.0]), &beta, 100, 0.95).unwrap();
        assert_abs_diff_eq!(ci[0].1 - 3.0, 0.1959964, epsilon = 1e-7);
        assert_abs_diff_eq!(3.0 - ci[0].0, 0.1959964, epsilon = 1e-7);
        assert_eq!(confidence_interval(&Theta(vec![3.0]), &beta, 100, 0.0).unwrap(), vec![(3.0, 3.0)]);
        let all = confidence_interval(&Theta(vec![3.0]), &beta, 100, 1.0).unwrap();
        assert!(all[0].0 == f64::NEG_INFINITY && all[0].1 == f64::INFINITY);
        let bad = DMatrix::from_element(1, 1, -1e-6);
        assert!(matches!(
            confidence_interval(&Theta(vec![3.0]), &bad, 10, 0.9),
            Err(Error::CovarianceIntegrity(_))
        ));
    }

    #[test]
    fn ellipses() {
        let theta = Theta(vec![0.0, 0.0]);
        let e = confidence_ellipse(&theta, &DMatrix::identity(2, 2), 1, 0.95, 16).unwrap();
        for (_, x, y) in &e {
            assert_abs_diff_eq!((x * x + y * y).sqrt(), 2.4477468306808166, epsilon = 1e-9);
        }
        let inner = confidence_ellipse(&theta, &DMatrix::identity(2, 2), 1, 0.5, 16).unwrap();
        let outer = confidence_ellipse(&theta, &DMatrix::identity(2, 2), 1, 0.975, 16).unwrap();
        for (a, b) in inner.iter().zip(&outer) {
            assert!(a.1.hypot(a.2) < b.1.hypot(b.2));
        }
        let diag = DMatrix::from_diagonal(&DVector::from_column_slice(&[4.0, 1.0]));
        let d = confidence_ellipse(&theta, &diag, 1, 0.9, 4).unwrap();
        assert_relative_eq!(d[0].1.abs() / d[1].2.abs(), 2.0, max_relative = 1e-12);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            confidence_ellipse(&theta, &singular, 1, 0.9, 4),
            Err(Error::CovarianceIntegrity(_))
        ));
    }

    #[test]
    fn bh_covariance_is_consistent() {
        let model = OffspringModel::bh_binary();
        let theta = Theta(vec![50.0, 0.7]);
        let r = covariance(&model, &theta, WeightScheme::W2, 200).unwrap();
        assert!(r.beta[(0, 0)] > 0.0 && r.beta[(1, 1)] > 0.0);
        assert!(r.beta.clone().symmetric_eigenvalues().min() > 0.0);
        assert!(r.tail_weight < 1e-15);
        assert_abs_diff_eq!(r.weight_limit.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        // W1 limit weights are the quasi-stationary product u∘v
        let w1 = covariance(&model, &theta, WeightScheme::W1, 200).unwrap();
        let qp = q_process(&model, &theta, 200, CurveOptions::default()).unwrap();
        assert_eq!(w1.weight_limit, qp.stationary);
        // halving the difference step
        let h: Vec<f64> = default_steps(&theta).iter().map(|h| h / 2.0).collect();
        let halved = covariance_with(&model, &theta, WeightScheme::W2, 200, &h).unwrap();
        for (a, b) in r.beta.iter().zip(halved.beta.iter()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-5);
        }
        // and doubling the truncation
        let wide = covariance(&model, &theta, WeightScheme::W2, 300).unwrap();
        for (a, b) in r.beta.iter().zip(wide.beta.iter()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-6);
        }
    }

    #[test]
    fn report_round_trips_through_json() {
        let model = OffspringModel::bh_binary();
        let r = covariance(&model, &Theta(vec![30.0, 0.7]), WeightScheme::W1, 120).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        let back: CovarianceReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn tail_underflow_is_reported() {
        let model = OffspringModel::bh_binary();
        let r = gamma_curve(&model, &Theta(vec![50.0, 0.7]), 400);
        assert!(matches!(r, Err(Error::TailTruncation { .. })));
        assert!(gamma_curve(&model, &Theta(vec![50.0, 0.7]), 200).is_ok());
    }
}
