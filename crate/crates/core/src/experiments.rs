//! Monte Carlo studies: repeated simulation and estimation with summary
//! tables, histograms, confidence-region overlays and coverage.
//!
//! Horizon `i` of a study with seed `s` simulates with master seed
//! `s + i·0x9E3779B97F4A7C15` (wrapping); replication `j` is stream `j` of
//! that seed, as in [`simulate_batch`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{confidence_ellipse, confidence_interval, covariance, default_z_max};
use crate::error::{Error, Result};
use crate::estimate::{estimate, sufficient_stats, OptConfig, SufficientStats, Target, WeightScheme};
use crate::model::{OffspringModel, Theta};
use crate::simulate::{simulate_batch, SimConfig, Trajectory, DEFAULT_CAP};

const HORIZON_SEED_STEP: u64 = 0x9E37_79B9_7F4A_7C15;

/// A weight scheme paired with a target curve.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Estimator {
    pub scheme: WeightScheme,
    pub target: Target,
}

impl Estimator {
    pub const fn new(scheme: WeightScheme, target: Target) -> Self {
        Estimator { scheme, target }
    }

    /// The four combinations of W1/W2 with the Q-process and raw targets.
    pub fn all() -> Vec<Estimator> {
        let mut out = vec![];
        for scheme in [WeightScheme::W1, WeightScheme::W2] {
            for target in [Target::QProcess, Target::Raw] {
                out.push(Estimator::new(scheme, target));
            }
        }
        out
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.scheme.name(), self.target.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (scheme, target) = s
            .split_once('/')
            .ok_or_else(|| Error::Parse(format!("estimator `{s}` is not of the form scheme/target")))?;
        Ok(Estimator::new(scheme.parse()?, target.parse()?))
    }
}

impl TryFrom<String> for Estimator {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Estimator> for String {
    fn from(e: Estimator) -> String {
        e.to_string()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    Growing,
    Stationary,
    Coverage,
}

/// Where β is evaluated for coverage intervals.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaAt {
    /// Plug-in β(θ̂) per replication.
    #[default]
    Estimate,
    Truth,
}

fn default_estimators() -> Vec<Estimator> {
    Estimator::all()
}

fn default_max_attempts() -> u64 {
    1_000_000
}

fn default_levels() -> Vec<f64> {
    vec![0.5, 0.75, 0.9, 0.95, 0.975]
}

fn default_level() -> f64 {
    0.95
}

fn default_bins() -> usize {
    30
}

fn default_initial() -> u64 {
    2
}

/// A study, usually read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: StudyKind,
    pub model: OffspringModel,
    pub theta0: Theta,
    #[serde(default = "default_initial")]
    pub initial_size: u64,
    pub horizons: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u64,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    /// Pool every replication of a horizon into one sample before fitting.
    #[serde(default)]
    pub pooled: bool,
    #[serde(default)]
    pub optimizer: Option<OptConfig>,
    /// Nominal level of coverage intervals.
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub beta_at: BetaAt,
    /// Levels of the confidence-ellipse overlays.
    #[serde(default = "default_levels")]
    pub ellipse_levels: Vec<f64>,
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Truncation for covariance computations; defaults to `max(4K₀, 64)`.
    #[serde(default)]
    pub covariance_z_max: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Free-form note, e.g. how tolerances were widened for a scaled-down run.
    #[serde(default)]
    pub note: Option<String>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate(&self.theta0)?;
        if self.horizons.is_empty() || self.horizons.windows(2).any(|w| w[0] >= w[1]) || self.horizons[0] == 0 {
            return Err(Error::Domain("horizons must be positive and increasing".into()));
        }
        if self.replications == 0 || self.estimators.is_empty() {
            return Err(Error::Domain("need at least one replication and one estimator".into()));
        }
        if !(0.0..=1.0).contains(&self.level) {
            return Err(Error::Domain(format!("level {} outside [0, 1]", self.level)));
        }
        if self.kind == StudyKind::Coverage && self.theta0.len() > 2 {
            return Err(Error::Domain("coverage studies take at most two parameters".into()));
        }
        Ok(())
    }

    fn sim_config(&self, horizon_index: usize) -> SimConfig {
        SimConfig {
            initial_size: self.initial_size,
            horizon: self.horizons[horizon_index],
            replications: self.replications,
            condition_on_survival: true,
            max_attempts: self.max_attempts,
            seed: horizon_seed(self.seed, horizon_index),
            cap: DEFAULT_CAP,
        }
    }
}

pub fn horizon_seed(seed: u64, horizon_index: usize) -> u64 {
    seed.wrapping_add((horizon_index as u64).wrapping_mul(HORIZON_SEED_STEP))
}

/// One fit in a study. `replication` is `None` for pooled fits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub horizon: usize,
    pub replication: Option<usize>,
    pub estimator: Estimator,
    /// `None` when the fit failed; see `error`.
    pub theta_hat: Option<Theta>,
    pub objective: Option<f64>,
    pub error: Option<String>,
    /// Final population size of the replication.
    pub final_size: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub estimator: Estimator,
    pub parameter: usize,
    pub horizon: usize,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub rmse_rel: f64,
}

/// `(1/N₀) Σ (θ̂ - θ₀)² / θ₀²`, written through the table statistics: with
/// the sample SD at divisor `N₀ - 1`, `((mean - θ₀)² + SD² (N₀-1)/N₀) / θ₀²`.
pub fn rmse_rel(mean: f64, sd: f64, theta0: f64, n0: usize) -> f64 {
    let n = n0 as f64;
    let var = if n0 > 1 { sd * sd * (n - 1.0) / n } else { 0.0 };
    ((mean - theta0).powi(2) + var) / (theta0 * theta0)
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn median(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Sample standard deviation, divisor `n - 1`; zero for a single value.
pub fn sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Summary per (estimator, parameter, horizon) over successful fits, in that
/// sort order.
pub fn summarize(records: &[ReplicationRecord], theta0: &Theta) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(Estimator, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        if let Some(t) = &r.theta_hat {
            for (j, &x) in t.as_slice().iter().enumerate() {
                groups.entry((r.estimator, j, r.horizon)).or_default().push(x);
            }
        }
    }
    groups
        .into_iter()
        .map(|((estimator, parameter, horizon), xs)| {
            let (m, s) = (mean(&xs), sd(&xs));
            SummaryRow {
                estimator,
                parameter,
                horizon,
                count: xs.len(),
                mean: m,
                median: median(&xs),
                sd: s,
                rmse_rel: rmse_rel(m, s, theta0.0[parameter], xs.len()),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    /// What is binned: `final-size` or an estimator and parameter.
    pub series: String,
    pub horizon: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Normal density `N(θ₀_j, β_jj / n)` at the bin centre, for Q-process
    /// estimators when β is available.
    pub density: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipsePoint {
    pub estimator: Estimator,
    pub horizon: usize,
    pub level: f64,
    pub phi: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub estimator: Estimator,
    pub parameter: usize,
    pub horizon: usize,
    pub level: f64,
    pub count: usize,
    pub coverage: f64,
    /// Sample variance of `√n (θ̂_j - θ₀_j)`.
    pub scaled_variance: f64,
    /// `β_jj(θ₀)`.
    pub beta_truth: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StudyOutput {
    pub records: Vec<ReplicationRecord>,
    pub summary: Vec<SummaryRow>,
    pub histograms: Vec<HistogramBin>,
    pub ellipses: Vec<EllipsePoint>,
    pub coverage: Vec<CoverageRow>,
    /// `K̂ - K̃` per replication and scheme, when both targets were fitted.
    pub differences: Vec<(usize, usize, WeightScheme, f64)>,
}

fn fit(stats: &SufficientStats, model: &OffspringModel, est: Estimator, opt: &OptConfig) -> (Option<Theta>, Option<f64>, Option<String>) {
    match estimate(stats, model, est.scheme, est.target, opt) {
        Ok(r) => (Some(r.theta_hat), Some(r.objective), None),
        Err(e) => (None, None, Some(format!("{}: {e}", e.kind()))),
    }
}

/// Simulates and fits every horizon. Fails if more than 1% of fits fail.
pub fn run_replications(config: &ExperimentConfig) -> Result<Vec<ReplicationRecord>> {
    config.validate()?;
    let opt = config.optimizer.clone().unwrap_or_default();
    let mut records = vec![];
    for (hi, &horizon) in config.horizons.iter().enumerate() {
        let batch = simulate_batch(&config.sim_config(hi), &config.model, &config.theta0)?;
        if config.pooled {
            let stats = sufficient_stats(batch.iter().map(|t| t.states.as_slice()))?;
            for &est in &config.estimators {
                let (theta_hat, objective, error) = fit(&stats, &config.model, est, &opt);
                records.push(ReplicationRecord {
                    horizon,
                    replication: None,
                    estimator: est,
                    theta_hat,
                    objective,
                    error,
                    final_size: None,
                });
            }
        } else {
            let per_rep: Vec<Vec<ReplicationRecord>> = batch
                .par_iter()
                .map(|t: &Trajectory| {
                    let stats = sufficient_stats([t.states.as_slice()]);
                    config
                        .estimators
                        .iter()
                        .map(|&est| {
                            let (theta_hat, objective, error) = match &stats {
                                Ok(s) => fit(s, &config.model, est, &opt),
                                Err(e) => (None, None, Some(format!("{}: {e}", e.kind()))),
                            };
                            ReplicationRecord {
                                horizon,
                                replication: Some(t.stream as usize),
                                estimator: est,
                                theta_hat,
                                objective,
                                error,
                                final_size: Some(t.last()),
                            }
                        })
                        .collect()
                })
                .collect();
            records.extend(per_rep.into_iter().flatten());
        }
    }
    let failed = records.iter().filter(|r| r.theta_hat.is_none()).count();
    if failed * 100 > records.len() {
        return Err(Error::StudyAborted {
            failed,
            total: records.len(),
        });
    }
    Ok(records)
}

fn normal_density(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

fn bins_of(xs: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    if xs.is_empty() || bins == 0 {
        return vec![];
    }
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &x in xs {
        let i = (((x - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect()
}

fn covariance_z_max(config: &ExperimentConfig) -> usize {
    config.covariance_z_max.unwrap_or_else(|| default_z_max(&config.theta0))
}

/// Histograms of final sizes and of each estimator's parameters, with the
/// asymptotic normal density for Q-process estimators, and confidence ellipses
/// around θ₀.
pub fn overlays(config: &ExperimentConfig, records: &[ReplicationRecord]) -> Result<(Vec<HistogramBin>, Vec<EllipsePoint>)> {
    let mut hist = vec![];
    let mut ellipses = vec![];
    let z_max = covariance_z_max(config);
    let mut betas = BTreeMap::new();
    for est in &config.estimators {
        if est.target == Target::QProcess {
            let r = covariance(&config.model, &config.theta0, est.scheme, z_max)?;
            betas.insert(*est, r.beta);
        }
    }
    for &horizon in &config.horizons {
        let at: Vec<&ReplicationRecord> = records.iter().filter(|r| r.horizon == horizon).collect();
        let mut finals: BTreeMap<Option<usize>, f64> = BTreeMap::new();
        for r in &at {
            if let Some(z) = r.final_size {
                finals.insert(r.replication, z as f64);
            }
        }
        let finals: Vec<f64> = finals.into_values().collect();
        for (lo, hi, count) in bins_of(&finals, config.bins) {
            hist.push(HistogramBin {
                series: "final-size".into(),
                horizon,
                lo,
                hi,
                count,
                density: None,
            });
        }
        for est in &config.estimators {
            for j in 0..config.theta0.len() {
                let xs: Vec<f64> = at
                    .iter()
                    .filter(|r| r.estimator == *est)
                    .filter_map(|r| r.theta_hat.as_ref().map(|t| t.0[j]))
                    .collect();
                let var = betas.get(est).map(|b| b[(j, j)] / horizon as f64);
                for (lo, hi, count) in bins_of(&xs, config.bins) {
                    hist.push(HistogramBin {
                        series: format!("{est}:{j}"),
                        horizon,
                        lo,
                        hi,
                        count,
                        density: var.map(|v| normal_density(0.5 * (lo + hi), config.theta0.0[j], v)),
                    });
                }
            }
            if let (Some(beta), 2) = (betas.get(est), config.theta0.len()) {
                for &level in &config.ellipse_levels {
                    for (phi, x, y) in confidence_ellipse(&config.theta0, beta, horizon as u64, level, 64)? {
                        ellipses.push(EllipsePoint {
                            estimator: *est,
                            horizon,
                            level,
                            phi,
                            x,
                            y,
                        });
                    }
                }
            }
        }
    }
    Ok((hist, ellipses))
}

/// Coverage of nominal `level` intervals for Q-process estimators, and the
/// sample variance of `√n (θ̂ - θ₀)` next to `β(θ₀)`.
pub fn coverage_from_records(config: &ExperimentConfig, records: &[ReplicationRecord], level: f64) -> Result<Vec<CoverageRow>> {
    let z_max = covariance_z_max(config);
    let d = config.theta0.len();
    let mut rows = vec![];
    for est in config.estimators.iter().filter(|e| e.target == Target::QProcess) {
        let truth = covariance(&config.model, &config.theta0, est.scheme, z_max)?.beta;
        for &horizon in &config.horizons {
            let fits: Vec<&Theta> = records
                .iter()
                .filter(|r| r.horizon == horizon && r.estimator == *est)
                .filter_map(|r| r.theta_hat.as_ref())
                .collect();
            let intervals: Vec<Result<Vec<(f64, f64)>>> = fits
                .par_iter()
                .map(|t| {
                    let beta = match config.beta_at {
                        BetaAt::Truth => truth.clone(),
                        BetaAt::Estimate => covariance(&config.model, t, est.scheme, z_max)?.beta,
                    };
                    confidence_interval(t, &beta, horizon as u64, level)
                })
                .collect();
            let intervals: Vec<Vec<(f64, f64)>> = intervals.into_iter().filter_map(|r| r.ok()).collect();
            for j in 0..d {
                let t0 = config.theta0.0[j];
                let hits = intervals.iter().filter(|ci| ci[j].0 <= t0 && t0 <= ci[j].1).count();
                let scaled: Vec<f64> = fits.iter().map(|t| (horizon as f64).sqrt() * (t.0[j] - t0)).collect();
                let m = mean(&scaled);
                let var = if scaled.len() > 1 {
                    scaled.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (scaled.len() - 1) as f64
                } else {
                    0.0
                };
                rows.push(CoverageRow {
                    estimator: *est,
                    parameter: j,
                    horizon,
                    level,
                    count: intervals.len(),
                    coverage: if intervals.is_empty() { f64::NAN } else { hits as f64 / intervals.len() as f64 },
                    scaled_variance: var,
                    beta_truth: Some(truth[(j, j)]),
                });
            }
        }
    }
    Ok(rows)
}

fn differences(records: &[ReplicationRecord]) -> Vec<(usize, usize, WeightScheme, f64)> {
    let mut by_key: BTreeMap<(usize, usize, WeightScheme), [Option<f64>; 2]> = BTreeMap::new();
    for r in records {
        let (Some(rep), Some(t)) = (r.replication, &r.theta_hat) else {
            continue;
        };
        let slot = by_key.entry((r.horizon, rep, r.estimator.scheme)).or_default();
        match r.estimator.target {
            Target::QProcess => slot[0] = Some(t.k()),
            Target::Raw => slot[1] = Some(t.k()),
        }
    }
    by_key
        .into_iter()
        .filter_map(|((h, rep, s), [q, raw])| Some((h, rep, s, q? - raw?)))
        .collect()
}

/// Growing-population study: summary table and `K̂ - K̃` differences.
pub fn run_growing_study(config: &ExperimentConfig) -> Result<StudyOutput> {
    let records = run_replications(config)?;
    let out = StudyOutput {
        summary: summarize(&records, &config.theta0),
        differences: differences(&records),
        records,
        ..Default::default()
    };
    if let Some(dir) = &config.output_dir {
        write_outputs(dir, &out)?;
    }
    Ok(out)
}

/// Study around the carrying capacity: summary, histograms with theoretical
/// densities, and confidence ellipses.
pub fn run_stationary_study(config: &ExperimentConfig) -> Result<StudyOutput> {
    let records = run_replications(config)?;
    let (histograms, ellipses) = overlays(config, &records)?;
    let out = StudyOutput {
        summary: summarize(&records, &config.theta0),
        differences: differences(&records),
        histograms,
        ellipses,
        records,
        ..Default::default()
    };
    if let Some(dir) = &config.output_dir {
        write_outputs(dir, &out)?;
    }
    Ok(out)
}

/// Empirical coverage of nominal `level` intervals.
pub fn run_coverage_study(config: &ExperimentConfig, level: f64) -> Result<StudyOutput> {
    let records = run_replications(config)?;
    let out = StudyOutput {
        summary: summarize(&records, &config.theta0),
        coverage: coverage_from_records(config, &records, level)?,
        records,
        ..Default::default()
    };
    if let Some(dir) = &config.output_dir {
        write_outputs(dir, &out)?;
    }
    Ok(out)
}

pub fn run(config: &ExperimentConfig) -> Result<StudyOutput> {
    match config.kind {
        StudyKind::Growing => run_growing_study(config),
        StudyKind::Stationary => run_stationary_study(config),
        StudyKind::Coverage => run_coverage_study(config, config.level),
    }
}

fn opt_f64(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Long-format estimates: one row per fit and parameter.
pub fn estimates_csv(records: &[ReplicationRecord]) -> String {
    let mut out = String::from("horizon,replication,estimator,parameter,value,objective,final_size,error\n");
    for r in records {
        let rep = r.replication.map(|x| x.to_string()).unwrap_or_else(|| "pooled".into());
        let fin = r.final_size.map(|x| x.to_string()).unwrap_or_default();
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        match &r.theta_hat {
            Some(t) => {
                for (j, x) in t.as_slice().iter().enumerate() {
                    out.push_str(&format!(
                        "{},{rep},{},{j},{x},{},{fin},\n",
                        r.horizon,
                        r.estimator,
                        opt_f64(r.objective)
                    ));
                }
            }
            None => out.push_str(&format!("{},{rep},{},,,,{fin},{err}\n", r.horizon, r.estimator)),
        }
    }
    out
}

/// Inverse of [`estimates_csv`].
pub fn read_estimates_csv(text: &str) -> Result<Vec<ReplicationRecord>> {
    let bad = |line: usize, what: &str| Error::Parse(format!("estimates line {line}: {what}"));
    let mut records: Vec<ReplicationRecord> = vec![];
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.splitn(8, ',').collect();
        if f.len() != 8 {
            return Err(bad(i + 1, "expected 8 fields"));
        }
        let horizon: usize = f[0].parse().map_err(|_| bad(i + 1, "horizon"))?;
        let replication = if f[1] == "pooled" {
            None
        } else {
            Some(f[1].parse().map_err(|_| bad(i + 1, "replication"))?)
        };
        let estimator: Estimator = f[2].parse()?;
        let final_size = if f[6].is_empty() {
            None
        } else {
            Some(f[6].parse().map_err(|_| bad(i + 1, "final size"))?)
        };
        if f[3].is_empty() {
            records.push(ReplicationRecord {
                horizon,
                replication,
                estimator,
                theta_hat: None,
                objective: None,
                error: Some(f[7].to_string()),
                final_size,
            });
            continue;
        }
        let j: usize = f[3].parse().map_err(|_| bad(i + 1, "parameter"))?;
        let x: f64 = f[4].parse().map_err(|_| bad(i + 1, "value"))?;
        let objective = if f[5].is_empty() {
            None
        } else {
            Some(f[5].parse().map_err(|_| bad(i + 1, "objective"))?)
        };
        let continues = j > 0
            && records.last().is_some_and(|r| {
                r.horizon == horizon && r.replication == replication && r.estimator == estimator
            });
        if continues {
            let last = records.last_mut().unwrap();
            last.theta_hat.as_mut().unwrap().0.push(x);
        } else {
            records.push(ReplicationRecord {
                horizon,
                replication,
                estimator,
                theta_hat: Some(Theta(vec![x])),
                objective,
                error: None,
                final_size,
            });
        }
    }
    Ok(records)
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("estimator,parameter,horizon,count,mean,median,sd,rmse_rel\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.estimator, r.parameter, r.horizon, r.count, r.mean, r.median, r.sd, r.rmse_rel
        ));
    }
    out
}

fn write_outputs(dir: &Path, out: &StudyOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    // per-replication estimates first, so an interrupted run keeps them
    std::fs::write(dir.join("estimates.csv"), estimates_csv(&out.records))?;
    std::fs::write(dir.join("summary.csv"), summary_csv(&out.summary))?;
    if !out.histograms.is_empty() {
        let mut s = String::from("series,horizon,lo,hi,count,density\n");
        for b in &out.histograms {
            s.push_str(&format!("{},{},{},{},{},{}\n", b.series, b.horizon, b.lo, b.hi, b.count, opt_f64(b.density)));
        }
        std::fs::write(dir.join("histograms.csv"), s)?;
    }
    if !out.ellipses.is_empty() {
        let mut s = String::from("estimator,horizon,level,phi,x,y\n");
        for e in &out.ellipses {
            s.push_str(&format!("{},{},{},{},{},{}\n", e.estimator, e.horizon, e.level, e.phi, e.x, e.y));
        }
        std::fs::write(dir.join("ellipses.csv"), s)?;
    }
    if !out.coverage.is_empty() {
        let mut s = String::from("estimator,parameter,horizon,level,count,coverage,scaled_variance,beta_truth\n");
        for c in &out.coverage {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.estimator,
                c.parameter,
                c.horizon,
                c.level,
                c.count,
                c.coverage,
                c.scaled_variance,
                opt_f64(c.beta_truth)
            ));
        }
        std::fs::write(dir.join("coverage.csv"), s)?;
    }
    if !out.differences.is_empty() {
        let mut s = String::from("horizon,replication,scheme,k_qprocess_minus_k_raw\n");
        for (h, rep, scheme, d) in &out.differences {
            s.push_str(&format!("{h},{rep},{},{d}\n", scheme.name()));
        }
        std::fs::write(dir.join("differences.csv"), s)?;
    }
    Ok(())
}
