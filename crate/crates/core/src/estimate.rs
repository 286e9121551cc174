//! Weighted least-squares estimation of θ from observed population sizes.
//!
//! The data enter only through per-state sufficient statistics. For each
//! visited state `z` the MLE `m̂(z)` of the mean offspring is compared with a
//! target curve: `m↑(z, θ)` of the Q-process (the consistent estimator θ̂) or
//! the raw mean `m(z, θ)` (the counterpart θ̃).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{OffspringModel, ParamKind, Theta};
use crate::qprocess::{CurveOptions, MupEvaluator};
use crate::simplex::{minimize, SimplexOptions};

/// Per-state counts over every step `Z_i → Z_{i+1}` with `Z_i > 0`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    /// `j(z)`: number of steps leaving `z`.
    pub visits: BTreeMap<u64, u64>,
    /// `Σ Z_{i+1} 1{Z_i = z}`.
    pub successor_sum: BTreeMap<u64, u64>,
    /// `Σ Z_i` over counted steps.
    pub total_parents: u64,
    /// Number of counted steps, so that W1 weights sum to 1.
    pub n_steps: u64,
}

impl SufficientStats {
    pub fn add_trajectory(&mut self, states: &[u64]) {
        for w in states.windows(2) {
            let (z, next) = (w[0], w[1]);
            if z == 0 {
                continue;
            }
            *self.visits.entry(z).or_default() += 1;
            *self.successor_sum.entry(z).or_default() += next;
            self.total_parents += z;
            self.n_steps += 1;
        }
    }

    pub fn merge(&mut self, other: &SufficientStats) {
        for (z, c) in &other.visits {
            *self.visits.entry(*z).or_default() += c;
        }
        for (z, s) in &other.successor_sum {
            *self.successor_sum.entry(*z).or_default() += s;
        }
        self.total_parents += other.total_parents;
        self.n_steps += other.n_steps;
    }

    pub fn max_state(&self) -> u64 {
        self.visits.keys().next_back().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    /// `m̂(z) = Σ Z_{i+1} 1{Z_i = z} / (z j(z))`, with `0/0 = 0`.
    pub fn mle_m(&self, z: u64) -> f64 {
        match self.visits.get(&z) {
            Some(&j) if j > 0 && z > 0 => self.successor_sum[&z] as f64 / (z as f64 * j as f64),
            _ => 0.0,
        }
    }
}

/// Sufficient statistics pooled over trajectories.
pub fn sufficient_stats<'a, I>(trajectories: I) -> Result<SufficientStats>
where
    I: IntoIterator<Item = &'a [u64]>,
{
    let mut stats = SufficientStats::default();
    let mut any = false;
    for t in trajectories {
        any = true;
        if t.len() < 2 {
            return Err(Error::Domain("a trajectory needs at least two states".into()));
        }
        stats.add_trajectory(t);
    }
    if !any {
        return Err(Error::Domain("no trajectories given".into()));
    }
    Ok(stats)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    /// `j(z) / n`: visit frequency.
    W1,
    /// `z j(z) / Σ Z_i`: individual-weighted visit frequency.
    W2,
    /// W2 restricted to `z ≤ cap` and renormalized.
    Capped(u64),
}

impl WeightScheme {
    pub fn name(&self) -> String {
        match self {
            WeightScheme::W1 => "w1".into(),
            WeightScheme::W2 => "w2".into(),
            WeightScheme::Capped(c) => format!("capped:{c}"),
        }
    }
}

impl std::str::FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        match s.as_str() {
            "w1" => Ok(WeightScheme::W1),
            "w2" => Ok(WeightScheme::W2),
            _ => {
                let cap = s
                    .strip_prefix("capped:")
                    .and_then(|c| c.parse::<u64>().ok())
                    .filter(|c| *c >= 1)
                    .ok_or_else(|| Error::Parse(format!("unknown weight scheme `{s}`")))?;
                Ok(WeightScheme::Capped(cap))
            }
        }
    }
}

/// Which curve the MLEs are fitted to.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    /// `m↑(z, θ)`: the estimator θ̂.
    #[serde(rename = "qprocess")]
    QProcess,
    /// `m(z, θ)`: the counterpart θ̃.
    Raw,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::QProcess => "qprocess",
            Target::Raw => "raw",
        }
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qprocess" | "q" | "q-process" => Ok(Target::QProcess),
            "raw" => Ok(Target::Raw),
            other => Err(Error::Parse(format!("unknown target `{other}`"))),
        }
    }
}

/// Estimated weights `ŵ(z)` on the visited states.
pub fn weights(stats: &SufficientStats, scheme: WeightScheme) -> Result<BTreeMap<u64, f64>> {
    if stats.is_empty() {
        return Err(Error::InsufficientData("no steps from a positive state".into()));
    }
    let out: BTreeMap<u64, f64> = match scheme {
        WeightScheme::W1 => stats
            .visits
            .iter()
            .map(|(&z, &j)| (z, j as f64 / stats.n_steps as f64))
            .collect(),
        WeightScheme::W2 => stats
            .visits
            .iter()
            .map(|(&z, &j)| (z, (z * j) as f64 / stats.total_parents as f64))
            .collect(),
        WeightScheme::Capped(cap) => {
            let kept: u64 = stats.visits.iter().filter(|(z, _)| **z <= cap).map(|(z, j)| z * j).sum();
            if kept == 0 {
                return Err(Error::InsufficientData(format!("no visited state at or below {cap}")));
            }
            stats
                .visits
                .iter()
                .filter(|(z, _)| **z <= cap)
                .map(|(&z, &j)| (z, (z * j) as f64 / kept as f64))
                .collect()
        }
    };
    Ok(out)
}

/// The fixed part of the objective: visited states, their MLEs and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FitData {
    pub states: Vec<u64>,
    pub mle: Vec<f64>,
    pub weights: Vec<f64>,
}

impl FitData {
    pub fn new(stats: &SufficientStats, scheme: WeightScheme) -> Result<Self> {
        let w = weights(stats, scheme)?;
        let states: Vec<u64> = w.keys().copied().collect();
        Ok(FitData {
            mle: states.iter().map(|&z| stats.mle_m(z)).collect(),
            weights: w.values().copied().collect(),
            states,
        })
    }

    pub fn max_state(&self) -> u64 {
        self.states.last().copied().unwrap_or(0)
    }

    /// `Σ ŵ(z) (m̂(z) - T(z))²` for a target evaluated at the visited states.
    pub fn residual_sum(&self, mut target: impl FnMut(u64) -> f64) -> f64 {
        self.states
            .iter()
            .zip(&self.mle)
            .zip(&self.weights)
            .map(|((&z, m), w)| {
                let r = m - target(z);
                w * r * r
            })
            .sum()
    }
}

/// Evaluates the objective for one model, scheme and target.
pub struct Objective<'a> {
    pub data: FitData,
    pub model: &'a OffspringModel,
    pub target: Target,
    evaluator: Option<MupEvaluator>,
}

impl<'a> Objective<'a> {
    pub fn new(
        stats: &SufficientStats,
        model: &'a OffspringModel,
        scheme: WeightScheme,
        target: Target,
        z_max: usize,
        curve: CurveOptions,
    ) -> Result<Self> {
        let data = FitData::new(stats, scheme)?;
        if (z_max as u64) < data.max_state() {
            return Err(Error::Domain(format!(
                "z_max = {z_max} is below the largest visited state {}",
                data.max_state()
            )));
        }
        let evaluator = (target == Target::QProcess).then(|| MupEvaluator::new(model.clone(), z_max, curve));
        Ok(Objective {
            data,
            model,
            target,
            evaluator,
        })
    }

    pub fn value(&self, theta: &Theta) -> Result<f64> {
        self.model.validate(theta)?;
        // no carrying capacity without growth at small sizes
        let mu = self.model.growth_mean(theta, &self.model.base_distribution(theta)?);
        if !(mu > 1.0) {
            return Err(Error::ParameterDomain(format!("growth mean {mu} is not above 1")));
        }
        match &self.evaluator {
            Some(ev) => {
                let curve = ev.curve(theta)?;
                Ok(self.data.residual_sum(|z| curve[z as usize - 1]))
            }
            None => {
                let mut err = None;
                let v = self.data.residual_sum(|z| match self.model.offspring_mean(z, theta) {
                    Ok(m) => m,
                    Err(e) => {
                        err = Some(e);
                        f64::NAN
                    }
                });
                match err {
                    Some(e) => Err(e),
                    None => Ok(v),
                }
            }
        }
    }
}

/// Objective value at θ; see [`Objective`].
pub fn objective(
    theta: &Theta,
    stats: &SufficientStats,
    model: &OffspringModel,
    scheme: WeightScheme,
    target: Target,
    z_max: usize,
) -> Result<f64> {
    Objective::new(stats, model, scheme, target, z_max, CurveOptions::default())?.value(theta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptConfig {
    /// Box for θ; defaults from the parameter kinds and the data.
    pub bounds: Option<Vec<(f64, f64)>>,
    /// Lattice points per dimension of the multistart grid.
    pub grid: usize,
    /// Number of best grid points refined by the simplex for the Q-process
    /// target. The raw target refines every grid point.
    pub refine_top: usize,
    /// Also start from the raw-target fit (Q-process target only).
    pub pilot_start: bool,
    pub xtol: f64,
    pub max_iter: usize,
    /// Truncation level of `Q`; defaults to [`default_fit_z_max`].
    pub z_max: Option<usize>,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            bounds: None,
            grid: 5,
            refine_top: 2,
            pilot_start: true,
            xtol: 1e-8,
            max_iter: 2000,
            z_max: None,
        }
    }
}

/// One simplex run of the multistart search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub start: Theta,
    pub endpoint: Theta,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub theta_hat: Theta,
    pub objective: f64,
    pub target: Target,
    pub scheme: WeightScheme,
    pub iterations: usize,
    pub converged: bool,
    /// Truncation level used for the Q-process target.
    pub z_max: Option<usize>,
    pub multistart_log: Vec<StartRecord>,
}

/// Default box: `K ∈ [1, 20·max state]`, probabilities in `[0.01, 0.99]`,
/// means in `[1.01, 50]`.
pub fn default_bounds(model: &OffspringModel, max_state: u64) -> Vec<(f64, f64)> {
    model
        .param_kinds()
        .iter()
        .map(|k| match k {
            ParamKind::CarryingCapacity => (1.0, 20.0 * max_state.max(1) as f64),
            ParamKind::Probability => (0.01, 0.99),
            ParamKind::Mean => (1.01, 50.0),
        })
        .collect()
}

/// Truncation level for fitting: `max(4·K_pilot, 2·max state, 64)`, capped at
/// `max(8·max state, 64)`.
pub fn default_fit_z_max(k_pilot: f64, max_state: u64) -> usize {
    let cap = (8 * max_state).max(64) as usize;
    let want = (4.0 * k_pilot.max(1.0)).ceil() as usize;
    want.max(2 * max_state as usize).max(64).min(cap)
}

/// Maps θ to the unit cube. The carrying capacity is on a log scale and a
/// mean `μ` on a `log(μ - 1)` scale, since near `μ = 1` the objective is flat
/// along curves where `K` changes by a factor while `μ - 1` does.
struct BoxMap {
    bounds: Vec<(f64, f64)>,
    /// `Some(c)`: coordinate is `log(θ - c)`.
    log_shift: Vec<Option<f64>>,
}

impl BoxMap {
    fn new(model: &OffspringModel, bounds: Vec<(f64, f64)>) -> Result<Self> {
        let kinds = model.param_kinds();
        if bounds.len() != kinds.len() {
            return Err(Error::Domain(format!(
                "expected {} bounds, got {}",
                kinds.len(),
                bounds.len()
            )));
        }
        for (lo, hi) in &bounds {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Domain(format!("bad bound [{lo}, {hi}]")));
            }
        }
        let log_shift = kinds
            .iter()
            .zip(&bounds)
            .map(|(k, (lo, _))| match k {
                ParamKind::CarryingCapacity if *lo > 0.0 => Some(0.0),
                ParamKind::Mean if *lo > 1.0 => Some(1.0),
                _ => None,
            })
            .collect();
        Ok(BoxMap { bounds, log_shift })
    }

    fn to_theta(&self, x: &[f64]) -> Theta {
        Theta(
            x.iter()
                .zip(&self.bounds)
                .zip(&self.log_shift)
                .map(|((&t, &(lo, hi)), &shift)| match shift {
                    Some(c) => {
                        let (a, b) = ((lo - c).ln(), (hi - c).ln());
                        (c + (a + t * (b - a)).exp()).clamp(lo, hi)
                    }
                    None => lo + t * (hi - lo),
                })
                .collect(),
        )
    }

    fn to_unit(&self, theta: &Theta) -> Vec<f64> {
        theta
            .as_slice()
            .iter()
            .zip(&self.bounds)
            .zip(&self.log_shift)
            .map(|((&v, &(lo, hi)), &shift)| {
                let t = match shift {
                    Some(c) => ((v - c).ln() - (lo - c).ln()) / ((hi - c).ln() - (lo - c).ln()),
                    None => (v - lo) / (hi - lo),
                };
                if t.is_nan() {
                    0.0
                } else {
                    t.clamp(0.0, 1.0)
                }
            })
            .collect()
    }

    /// Cell centres of a `g^d` lattice.
    fn grid(&self, g: usize) -> Vec<Vec<f64>> {
        let d = self.bounds.len();
        let mut points = vec![vec![]];
        for _ in 0..d {
            let mut next = Vec::with_capacity(points.len() * g);
            for p in &points {
                for i in 0..g {
                    let mut q = p.clone();
                    q.push((i as f64 + 0.5) / g as f64);
                    next.push(q);
                }
            }
            points = next;
        }
        points
    }
}

fn better(a: (f64, &Theta), b: (f64, &Theta)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 .0[0] < b.1 .0[0])
}

fn run_multistart(
    obj: &Objective,
    map: &BoxMap,
    config: &OptConfig,
    extra_start: Option<&Theta>,
    refine_top: usize,
) -> Result<EstimateResult> {
    let f = |x: &[f64]| obj.value(&map.to_theta(x)).unwrap_or(f64::INFINITY);

    let grid = map.grid(config.grid.max(1));
    let scored: Vec<(f64, Vec<f64>)> = grid.into_par_iter().map(|x| (f(&x), x)).collect();
    let mut ranked: Vec<(f64, Vec<f64>)> = scored;
    ranked.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| a.1[0].total_cmp(&b.1[0]))
    });
    let mut starts: Vec<Vec<f64>> = ranked
        .iter()
        .filter(|(v, _)| v.is_finite())
        .take(refine_top)
        .map(|(_, x)| x.clone())
        .collect();
    if let Some(t) = extra_start {
        let x = map.to_unit(t);
        if !starts.iter().any(|s| s.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-6)) {
            starts.push(x);
        }
    }
    if starts.is_empty() {
        return Err(Error::OptimizerNonConvergence { starts: ranked.len() });
    }

    let options = SimplexOptions {
        xtol: config.xtol,
        max_iter: config.max_iter,
        ..Default::default()
    };
    let log: Vec<StartRecord> = starts
        .par_iter()
        .map(|s| {
            let r = minimize(f, s, options);
            StartRecord {
                start: map.to_theta(s),
                endpoint: map.to_theta(&r.x),
                value: r.value,
                iterations: r.iterations,
                converged: r.converged,
            }
        })
        .collect();

    let mut best: Option<&StartRecord> = None;
    for rec in log.iter().filter(|r| r.converged && r.value.is_finite()) {
        if best.is_none_or(|b| better((rec.value, &rec.endpoint), (b.value, &b.endpoint))) {
            best = Some(rec);
        }
    }
    let Some(best) = best else {
        return Err(Error::OptimizerNonConvergence { starts: log.len() });
    };
    let (mut theta_hat, mut value, mut converged) = (best.endpoint.clone(), best.value, true);
    // the simplex never does worse than its start, but a grid point that was
    // not refined could still beat every endpoint
    if let Some((v, x)) = ranked.first() {
        if *v < value {
            theta_hat = map.to_theta(x);
            value = *v;
            converged = false;
        }
    }
    Ok(EstimateResult {
        objective: obj.value(&theta_hat).unwrap_or(value),
        theta_hat,
        target: obj.target,
        scheme: WeightScheme::W1,
        iterations: best.iterations,
        converged,
        z_max: None,
        multistart_log: log,
    })
}

/// Fits θ by bounded multistart simplex search.
///
/// Every point of the multistart lattice is evaluated. For the raw target
/// each lattice point is then refined; for the Q-process target, whose
/// evaluations need a spectral solve, only the `refine_top` best lattice
/// points and the raw-target fit are refined.
pub fn estimate(
    stats: &SufficientStats,
    model: &OffspringModel,
    scheme: WeightScheme,
    target: Target,
    config: &OptConfig,
) -> Result<EstimateResult> {
    let data = FitData::new(stats, scheme)?;
    let max_state = data.max_state();
    let bounds = config
        .bounds
        .clone()
        .unwrap_or_else(|| default_bounds(model, max_state));
    let map = BoxMap::new(model, bounds)?;
    let n_grid = config.grid.max(1).pow(model.dim() as u32);

    let raw_obj = Objective::new(stats, model, scheme, Target::Raw, max_state as usize, CurveOptions::default())?;
    let raw = run_multistart(&raw_obj, &map, config, None, n_grid);
    let mut result = match target {
        Target::Raw => raw?,
        Target::QProcess => {
            let pilot = raw.ok();
            let z_max = config.z_max.unwrap_or_else(|| {
                let k = pilot.as_ref().map_or(max_state as f64, |p| p.theta_hat.k());
                default_fit_z_max(k, max_state)
            });
            let obj = Objective::new(stats, model, scheme, Target::QProcess, z_max, CurveOptions::default())?;
            let extra = if config.pilot_start {
                pilot.as_ref().map(|p| &p.theta_hat)
            } else {
                None
            };
            let mut r = run_multistart(&obj, &map, config, extra, config.refine_top.max(1))?;
            r.z_max = Some(z_max);
            r
        }
    };
    result.scheme = scheme;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BaseSpec, Family};
    use crate::qprocess::m_up_curve;
    use approx::assert_abs_diff_eq;

    fn stats_of(t: &[u64]) -> SufficientStats {
        sufficient_stats([t]).unwrap()
    }

    #[test]
    fn counting() {
        let s = stats_of(&[2, 4, 2, 4]);
        assert_eq!(s.visits, BTreeMap::from([(2, 2), (4, 1)]));
        assert_eq!(s.successor_sum, BTreeMap::from([(2, 8), (4, 2)]));
        assert_eq!(s.total_parents, 8);
        assert_eq!(s.n_steps, 3);

        let t: &[u64] = &[2, 4, 2, 4];
        let doubled = sufficient_stats([t, t]).unwrap();
        assert_eq!(doubled.visits, BTreeMap::from([(2, 4), (4, 2)]));
        assert_eq!(doubled.total_parents, 16);

        let dead = stats_of(&[3, 0, 0]);
        assert_eq!(dead.visits, BTreeMap::from([(3, 1)]));
        assert_eq!(dead.successor_sum, BTreeMap::from([(3, 0)]));
        assert_eq!(dead.n_steps, 1);
    }

    #[test]
    fn empty_inputs() {
        assert!(matches!(sufficient_stats(std::iter::empty::<&[u64]>()), Err(Error::Domain(_))));
        let t: &[u64] = &[3];
        assert!(matches!(sufficient_stats([t]), Err(Error::Domain(_))));
    }

    #[test]
    fn mle_and_weights() {
        let s = stats_of(&[2, 4, 2, 4]);
        assert_eq!(s.mle_m(2), 2.0);
        assert_eq!(s.mle_m(4), 0.5);
        assert_eq!(s.mle_m(7), 0.0);
        let w1 = weights(&s, WeightScheme::W1).unwrap();
        assert_abs_diff_eq!(w1[&2], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w1[&4], 1.0 / 3.0, epsilon = 1e-15);
        let w2 = weights(&s, WeightScheme::W2).unwrap();
        assert_eq!(w2[&2], 0.5);
        assert_eq!(w2[&4], 0.5);
        let capped = weights(&s, WeightScheme::Capped(3)).unwrap();
        assert_eq!(capped, BTreeMap::from([(2, 1.0)]));
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("w1".parse::<WeightScheme>().unwrap(), WeightScheme::W1);
        assert_eq!("capped:40".parse::<WeightScheme>().unwrap(), WeightScheme::Capped(40));
        assert!("capped:0".parse::<WeightScheme>().is_err());
        assert_eq!("raw".parse::<Target>().unwrap(), Target::Raw);
    }

    #[test]
    fn objective_by_hand() {
        let model = OffspringModel::bh_binary();
        let theta = Theta(vec![30.0, 0.6]);
        let s = stats_of(&[2, 4, 2, 4]);
        let m2 = model.offspring_mean(2, &theta).unwrap();
        let m4 = model.offspring_mean(4, &theta).unwrap();
        let want = 0.5 * (2.0 - m2).powi(2) + 0.5 * (0.5 - m4).powi(2);
        let got = objective(&theta, &s, &model, WeightScheme::W2, Target::Raw, 4).unwrap();
        assert_abs_diff_eq!(got, want, epsilon = 1e-14);
    }

    #[test]
    fn z_max_below_data_is_rejected() {
        let model = OffspringModel::bh_binary();
        let s = stats_of(&[10, 20, 30]);
        let r = objective(&Theta(vec![30.0, 0.6]), &s, &model, WeightScheme::W2, Target::QProcess, 15);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    /// Stats whose MLEs equal a given curve at chosen states.
    fn synthetic(curve: impl Fn(u64) -> f64, states: &[u64]) -> SufficientStats {
        // m̂(z) = successor_sum / (z j); pick j = 10^6 and round the sum
        let mut s = SufficientStats::default();
        for &z in states {
            let j = 1_000_000u64;
            s.visits.insert(z, j);
            s.successor_sum.insert(z, (curve(z) * (z * j) as f64).round() as u64);
            s.total_parents += z * j;
            s.n_steps += j;
        }
        s
    }

    #[test]
    fn recovers_theta_from_exact_raw_curve() {
        let model = OffspringModel::geometric(Family::Ricker);
        let truth = Theta(vec![40.0, 2.0]);
        let states: Vec<u64> = (5..=70).step_by(5).collect();
        let s = synthetic(|z| model.offspring_mean(z, &truth).unwrap(), &states);
        let r = estimate(&s, &model, WeightScheme::W2, Target::Raw, &OptConfig::default()).unwrap();
        assert_abs_diff_eq!(r.theta_hat.0[0], 40.0, epsilon = 1e-3);
        assert_abs_diff_eq!(r.theta_hat.0[1], 2.0, epsilon = 1e-4);
        assert!(r.objective < 1e-10);
    }

    #[test]
    fn recovers_theta_from_exact_q_curve() {
        let model = OffspringModel::bh_binary();
        let truth = Theta(vec![30.0, 0.6]);
        let z_max = 128;
        let curve = m_up_curve(&model, &truth, z_max).unwrap();
        let states: Vec<u64> = (2..=60).step_by(2).collect();
        let s = synthetic(|z| curve[z as usize - 1], &states);
        let config = OptConfig {
            z_max: Some(z_max),
            ..Default::default()
        };
        let r = estimate(&s, &model, WeightScheme::W2, Target::QProcess, &config).unwrap();
        assert_abs_diff_eq!(r.theta_hat.0[0], 30.0, epsilon = 1e-4 * 30.0);
        assert_abs_diff_eq!(r.theta_hat.0[1], 0.6, epsilon = 1e-4);
        assert!(r.objective < 1e-10);
        // nothing on the lattice beats the answer
        let obj = Objective::new(&s, &model, WeightScheme::W2, Target::QProcess, z_max, CurveOptions::default()).unwrap();
        let map = BoxMap::new(&model, default_bounds(&model, 60)).unwrap();
        for x in map.grid(5) {
            // lattice points with 2v <= 1 are outside the supercritical domain
            if let Ok(v) = obj.value(&map.to_theta(&x)) {
                assert!(v >= r.objective);
            }
        }
    }

    #[test]
    fn k_only_model_fits() {
        let model = OffspringModel::new(Family::BevertonHolt, BaseSpec::Empirical { pmf: vec![0.2, 0.3, 0.5] }).unwrap();
        let truth = Theta(vec![25.0]);
        let states: Vec<u64> = (1..=50).collect();
        let s = synthetic(|z| model.offspring_mean(z, &truth).unwrap(), &states);
        let r = estimate(&s, &model, WeightScheme::W1, Target::Raw, &OptConfig::default()).unwrap();
        assert_abs_diff_eq!(r.theta_hat.0[0], 25.0, epsilon = 1e-3);
    }

    #[test]
    fn box_map_round_trip() {
        let model = OffspringModel::bh_binary();
        let map = BoxMap::new(&model, vec![(1.0, 2000.0), (0.01, 0.99)]).unwrap();
        let t = Theta(vec![100.0, 0.6]);
        let back = map.to_theta(&map.to_unit(&t));
        assert_abs_diff_eq!(back.0[0], 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(back.0[1], 0.6, epsilon = 1e-12);
        assert_eq!(map.grid(5).len(), 25);
    }

    #[test]
    fn fit_z_max_rule() {
        assert_eq!(default_fit_z_max(50.0, 80), 200);
        assert_eq!(default_fit_z_max(10.0, 20), 64);
        assert_eq!(default_fit_z_max(900.0, 50), 400);
    }
}
