//! Truncated one-step transition kernel `Q` on states `1..=z_max`.
//!
//! Row `i` of `Q` is the `i`-fold convolution of the offspring law at
//! population size `i`, with the outcome 0 (absorption) removed. Rows are
//! stored sparsely as a contiguous band of columns.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{OffspringModel, OffspringPmf, Theta};

/// Entries below this fraction of a row's peak are dropped from the band.
const TRIM_RELATIVE: f64 = 1e-30;

/// What happens to transitions landing above `z_max`.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryPolicy {
    /// Mass above `z_max` is added to the last column.
    #[default]
    LumpTop,
    /// Mass above `z_max` is dropped.
    Kill,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelOptions {
    pub policy: BoundaryPolicy,
    /// Under [`BoundaryPolicy::Kill`], the largest mass a row may lose.
    pub kill_bound: Option<f64>,
}

impl KernelOptions {
    pub fn kill(bound: Option<f64>) -> Self {
        KernelOptions {
            policy: BoundaryPolicy::Kill,
            kill_bound: bound,
        }
    }
}

/// One sparse row: `values[k]` sits in column `start + k` (0-based, so state
/// `start + k + 1`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KernelRow {
    pub start: usize,
    pub values: Vec<f64>,
}

impl KernelRow {
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn get(&self, j: usize) -> f64 {
        if j < self.start {
            return 0.0;
        }
        self.values.get(j - self.start).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .map(move |(k, &q)| (self.start + k, q))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedKernel {
    pub z_max: usize,
    pub rows: Vec<KernelRow>,
    pub policy: BoundaryPolicy,
    /// Per-row mass above `z_max`, lumped or dropped according to `policy`.
    pub lost_mass: Vec<f64>,
    /// Per-row one-step extinction probability `p₀(i)^i`.
    pub absorption: Vec<f64>,
}

impl TruncatedKernel {
    /// Wrap an arbitrary non-negative square matrix, e.g. for tests.
    pub fn from_dense(q: &DMatrix<f64>) -> Result<Self> {
        if q.nrows() != q.ncols() || q.nrows() == 0 {
            return Err(Error::Domain("kernel must be a non-empty square matrix".into()));
        }
        if q.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::Domain("kernel entries must be finite and non-negative".into()));
        }
        let n = q.nrows();
        let rows: Vec<KernelRow> = (0..n)
            .map(|i| {
                let row: Vec<f64> = q.row(i).iter().copied().collect();
                let first = row.iter().position(|&x| x > 0.0).unwrap_or(0);
                let last = row.iter().rposition(|&x| x > 0.0).map_or(0, |l| l + 1);
                KernelRow {
                    start: first,
                    values: row[first..last.max(first)].to_vec(),
                }
            })
            .collect();
        let absorption = rows.iter().map(|r| (1.0 - r.sum()).max(0.0)).collect();
        Ok(TruncatedKernel {
            z_max: n,
            rows,
            policy: BoundaryPolicy::Kill,
            lost_mass: vec![0.0; n],
            absorption,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i].get(j)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.z_max;
        let mut q = DMatrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for (j, x) in row.iter() {
                q[(i, j)] = x;
            }
        }
        q
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.rows.iter().map(KernelRow::sum).collect()
    }

    /// `out = Q x`.
    pub fn mul_right(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(&self.rows) {
            *o = row
                .values
                .iter()
                .zip(&x[row.start..row.start + row.values.len()])
                .map(|(q, y)| q * y)
                .sum();
        }
    }

    /// `out = xᵀ Q`.
    pub fn mul_left(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (xi, row) in x.iter().zip(&self.rows) {
            if *xi == 0.0 {
                continue;
            }
            for (o, q) in out[row.start..row.start + row.values.len()]
                .iter_mut()
                .zip(&row.values)
            {
                *o += xi * q;
            }
        }
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.values.len()).sum()
    }

    /// Dense CSV dump with a header row of states.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("state");
        for j in 1..=self.z_max {
            s.push_str(&format!(",{j}"));
        }
        s.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            s.push_str(&(i + 1).to_string());
            for j in 0..self.z_max {
                s.push(',');
                s.push_str(&row.get(j).to_string());
            }
            s.push('\n');
        }
        s
    }
}

/// Convolution of two pmfs, keeping indices `0..=out_max`.
fn convolve_truncated(a: &[f64], b: &[f64], out_max: usize) -> Vec<f64> {
    let len = (a.len() + b.len() - 1).min(out_max + 1);
    let mut out = vec![0.0; len];
    for (i, &x) in a.iter().enumerate().take(len) {
        if x == 0.0 {
            continue;
        }
        for (o, &y) in out[i..].iter_mut().zip(b) {
            *o += x * y;
        }
    }
    out
}

/// Law of the sum of `i` independent draws from `pmf`, truncated at
/// `out_max`, by binary exponentiation of direct convolution.
pub fn convolve_power(pmf: &OffspringPmf, i: u64, out_max: usize) -> Result<OffspringPmf> {
    if out_max == 0 {
        return Err(Error::Domain("out_max must be positive".into()));
    }
    if i == 0 {
        return Err(Error::Domain("convolution power must be at least 1".into()));
    }
    let mut base: Vec<f64> = pmf.probabilities.iter().take(out_max + 1).copied().collect();
    let mut acc: Option<Vec<f64>> = None;
    let mut n = i;
    loop {
        if n & 1 == 1 {
            acc = Some(match acc {
                None => base.clone(),
                Some(a) => convolve_truncated(&a, &base, out_max),
            });
        }
        n >>= 1;
        if n == 0 {
            break;
        }
        base = convolve_truncated(&base, &base, out_max);
    }
    let probabilities = acc.unwrap();
    let kept: f64 = probabilities.iter().sum();
    Ok(OffspringPmf {
        tail_mass: (1.0 - kept).max(0.0),
        probabilities,
    })
}

/// Number of convolution powers that fell back to direct convolution.
pub static DIRECT_FALLBACKS: AtomicUsize = AtomicUsize::new(0);

/// `n`-th convolution power of the pmf `f` on indices `0..=out_max`, and
/// whether mass beyond `out_max` may be present.
pub(crate) fn pmf_power(f: &[f64], n: u64, out_max: usize) -> (Vec<f64>, bool) {
    if let Some(out) = power_recurrence(f, n, out_max) {
        return out;
    }
    DIRECT_FALLBACKS.fetch_add(1, Ordering::Relaxed);
    let support = (f.len() as u64 - 1).saturating_mul(n);
    let pmf = OffspringPmf {
        probabilities: f.to_vec(),
        tail_mass: 0.0,
    };
    let out = convolve_power(&pmf, n, out_max).expect("out_max and n are positive");
    (out.probabilities, support > out_max as u64)
}

/// Convolution power by the recurrence `k f₀ a_k = Σ_j ((n+1) j - k) f_j a_{k-j}`
/// run in rescaled arithmetic. Entries far below the peak past the mean are
/// cut off, so the result may be shorter than `out_max + 1`.
///
/// The recurrence can amplify rounding error when `f₀` is small next to the
/// other entries, so the result is checked against the exact total mass and
/// mean and `None` is returned if either is off.
pub(crate) fn power_recurrence(f: &[f64], n: u64, out_max: usize) -> Option<(Vec<f64>, bool)> {
    let Some(shift) = f.iter().position(|&x| x > 0.0) else {
        return Some((vec![0.0], false));
    };
    let last = f.iter().rposition(|&x| x > 0.0).unwrap();
    let g = &f[shift..=last];
    let offset = (shift as u64).saturating_mul(n);
    if offset > out_max as u64 {
        return Some((vec![0.0], true));
    }
    let offset = offset as usize;
    let room = out_max - offset;
    let support = (g.len() as u64 - 1).saturating_mul(n);
    // run past out_max so the mass and mean checks see the whole law
    let limit = (2 * room + 64).min(support as usize);

    let g0 = g[0];
    let nf = n as f64;
    let total_g: f64 = g.iter().sum();
    let mean_g: f64 = g.iter().enumerate().map(|(j, &x)| j as f64 * x).sum::<f64>() / total_g;
    let centre = nf * mean_g;

    // scaled values: true a_k = a[k] * exp(log_scale)
    let mut log_scale = nf * g0.ln();
    let mut a = Vec::with_capacity(limit.min(room) + 64);
    a.push(1.0f64);
    let mut peak = 1.0f64;
    let mut complete = limit as u64 == support;
    // the recurrence only looks back g.len() - 1 places, so a run that long
    // of negligible values can be dropped (lattice gaps produce exact zeros)
    let mut small_run = 0;
    for k in 1..=limit {
        let jmax = k.min(g.len() - 1);
        let kf = k as f64;
        let mut s = 0.0;
        for j in 1..=jmax {
            s += ((nf + 1.0) * j as f64 - kf) * g[j] * a[k - j];
        }
        let mut ak = s / (kf * g0);
        if ak.abs() > 1e280 {
            a.iter_mut().for_each(|x| *x *= 1e-280);
            ak *= 1e-280;
            peak *= 1e-280;
            log_scale += 280.0 * std::f64::consts::LN_10;
        }
        a.push(ak);
        peak = peak.max(ak);
        if ak.abs() < TRIM_RELATIVE * peak {
            small_run += 1;
        } else {
            small_run = 0;
        }
        if kf > centre && small_run >= g.len() - 1 {
            complete = true;
            break;
        }
    }
    if !complete || !a.iter().all(|x| x.is_finite()) {
        return None;
    }
    let values: Vec<f64> = a
        .iter()
        .map(|&x| if x <= 0.0 { 0.0 } else { (x.ln() + log_scale).exp() })
        .collect();
    let (mass, first) = values
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(m0, m1), (k, &x)| (m0 + x, m1 + k as f64 * x));
    let expected_mass = total_g.powf(nf);
    if (mass - expected_mass).abs() > 1e-12 || (first / mass - centre).abs() > 1e-12 * (1.0 + centre) {
        return None;
    }
    let keep = values.len().min(room + 1);
    let capped = values.len() > room + 1;
    let mut out = vec![0.0; offset];
    out.extend_from_slice(&values[..keep]);
    Some((out, capped))
}

fn trimmed(values: &[f64], start: usize) -> KernelRow {
    let peak = values.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return KernelRow::default();
    }
    let thr = peak * TRIM_RELATIVE;
    let first = values.iter().position(|&x| x >= thr).unwrap();
    let last = values.iter().rposition(|&x| x >= thr).unwrap();
    KernelRow {
        start: start + first,
        values: values[first..=last].to_vec(),
    }
}

/// Full pmf (indices `0..=z_max`) of the population one step after `i`
/// individuals, plus whether mass beyond `z_max` may be present.
fn row_pmf(model: &OffspringModel, theta: &Theta, i: u64, z_max: usize) -> Result<(Vec<f64>, bool)> {
    let f = model.factors(i, theta)?;
    let (zi, zi_cap) = pmf_power(&f.zero_inflated, i, z_max);
    let capped = zi_cap || f.zero_inflated_tail > 0.0;
    match f.survival {
        None => Ok((zi, capped)),
        Some(s) => {
            // survivors ~ Binomial(i, 1 - d), independent of the young
            let (surv, surv_cap) = pmf_power(&[1.0 - s, s], i, z_max);
            let full = convolve_truncated(&surv, &zi, z_max);
            Ok((full, capped || surv_cap || surv.len() + zi.len() - 1 > z_max + 1))
        }
    }
}

/// Builds `Q(θ)` on states `1..=z_max`.
pub fn build_kernel(
    model: &OffspringModel,
    theta: &Theta,
    z_max: usize,
    options: KernelOptions,
) -> Result<TruncatedKernel> {
    if z_max == 0 {
        return Err(Error::Domain("z_max must be at least 1".into()));
    }
    model.validate(theta)?;
    let built: Vec<(KernelRow, f64, f64)> = (1..=z_max as u64)
        .into_par_iter()
        .map(|i| -> Result<(KernelRow, f64, f64)> {
            let (mut pmf, capped) = row_pmf(model, theta, i, z_max)?;
            pmf.resize(z_max + 1, 0.0);
            let absorption = pmf[0];
            let over = if capped {
                (1.0 - pmf.iter().sum::<f64>()).max(0.0)
            } else {
                0.0
            };
            if options.policy == BoundaryPolicy::LumpTop {
                pmf[z_max] += over;
            } else if let Some(bound) = options.kill_bound {
                if over > bound {
                    return Err(Error::Truncation(format!(
                        "row {i} loses mass {over:e} above z_max = {z_max} (bound {bound:e})"
                    )));
                }
            }
            Ok((trimmed(&pmf[1..], 0), over, absorption))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(z_max);
    let mut lost_mass = Vec::with_capacity(z_max);
    let mut absorption = Vec::with_capacity(z_max);
    for (r, l, a) in built {
        rows.push(r);
        lost_mass.push(l);
        absorption.push(a);
    }
    Ok(TruncatedKernel {
        z_max,
        rows,
        policy: options.policy,
        lost_mass,
        absorption,
    })
}
