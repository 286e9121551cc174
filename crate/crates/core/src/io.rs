//! File formats: trajectory and census CSV, estimation reports, digests.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimate::{default_fit_z_max, estimate, weights, EstimateResult, OptConfig, SufficientStats, Target, WeightScheme};
use crate::model::{BaseSpec, Family, OffspringModel, ROBIN_EMPIRICAL_B};
use crate::qprocess::m_up_curve;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn header(line: Option<&str>) -> Vec<String> {
    line.unwrap_or("")
        .split(',')
        .map(|s| s.trim().to_ascii_lowercase())
        .collect()
}

/// Reads `t,z` (one trajectory) or `rep,t,z` (several, long format). Rows of
/// a replication must be in time order starting at `t = 0`.
pub fn read_trajectories_csv(text: &str) -> Result<Vec<Vec<u64>>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let cols = header(lines.next());
    let long = match cols.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["t", "z"] => false,
        ["rep", "t", "z"] => true,
        _ => return Err(Error::Parse(format!("expected header `t,z` or `rep,t,z`, got `{}`", cols.join(",")))),
    };
    let mut out: Vec<Vec<u64>> = vec![];
    let mut current_rep: Option<String> = None;
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |what: &str| Error::Parse(format!("trajectory row {}: {what}", i + 2));
        let (rep, t, z) = match (long, f.as_slice()) {
            (false, [t, z]) => (None, *t, *z),
            (true, [r, t, z]) => (Some(r.to_string()), *t, *z),
            _ => return Err(bad("wrong number of fields")),
        };
        let t: usize = t.parse().map_err(|_| bad("time is not a non-negative integer"))?;
        let z: u64 = z.parse().map_err(|_| bad("size is not a non-negative integer"))?;
        if out.is_empty() || (long && rep != current_rep) {
            current_rep = rep;
            out.push(vec![]);
        }
        let path = out.last_mut().unwrap();
        if t != path.len() {
            return Err(bad("times must run 0, 1, 2, ... within a trajectory"));
        }
        if t == 0 && z == 0 {
            return Err(bad("a trajectory must start from a positive size"));
        }
        path.push(z);
    }
    if out.is_empty() {
        return Err(Error::InsufficientData("no trajectory rows".into()));
    }
    Ok(out)
}

/// Yearly census of a population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CensusSeries {
    pub years: Vec<i64>,
    pub counts: Vec<u64>,
    pub source: String,
}

impl CensusSeries {
    pub fn new(years: Vec<i64>, counts: Vec<u64>, source: impl Into<String>) -> Result<Self> {
        if years.len() != counts.len() {
            return Err(Error::Parse("years and counts differ in length".into()));
        }
        if years.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Parse("census years must increase by one".into()));
        }
        if counts.first().is_some_and(|c| *c == 0) {
            return Err(Error::Parse("census must start from a positive count".into()));
        }
        Ok(CensusSeries {
            years,
            counts,
            source: source.into(),
        })
    }
}

/// Reads a `year,count` CSV.
pub fn read_census_csv(text: &str, source: &str) -> Result<CensusSeries> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let cols = header(lines.next());
    if cols != ["year", "count"] {
        return Err(Error::Parse(format!("expected header `year,count`, got `{}`", cols.join(","))));
    }
    let mut years = vec![];
    let mut counts = vec![];
    for (i, line) in lines.enumerate() {
        let bad = || Error::Parse(format!("census row {}: expected `year,count`", i + 2));
        let (y, c) = line.split_once(',').ok_or_else(bad)?;
        years.push(y.trim().parse().map_err(|_| bad())?);
        counts.push(c.trim().parse().map_err(|_| bad())?);
    }
    CensusSeries::new(years, counts, source)
}

/// Offspring base for the black-robin model.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum RobinBase {
    Empirical,
    Binomial,
}

pub fn robin_model(family: Family, base: RobinBase) -> Result<OffspringModel> {
    if !family.is_robin() {
        return Err(Error::ParameterDomain(format!("{family} is not a robin family")));
    }
    let base = match base {
        RobinBase::Empirical => BaseSpec::Empirical {
            pmf: ROBIN_EMPIRICAL_B.to_vec(),
        },
        RobinBase::Binomial => BaseSpec::Binomial {
            trials: crate::model::ROBIN_TRIALS,
        },
    };
    OffspringModel::new(family, base)
}

/// Fits a census series as a single trajectory.
pub fn fit_census(
    series: &CensusSeries,
    model: &OffspringModel,
    scheme: WeightScheme,
    target: Target,
    opt: &OptConfig,
) -> Result<EstimateResult> {
    if series.counts.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "a census needs at least 3 years, got {}",
            series.counts.len()
        )));
    }
    let mut stats = SufficientStats::default();
    stats.add_trajectory(&series.counts);
    estimate(&stats, model, scheme, target, opt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateRow {
    pub z: u64,
    pub m_hat: f64,
    pub weight: f64,
    pub m_up: f64,
    pub m: f64,
}

/// Everything needed to redraw a fit: inputs digest, estimate, and the
/// per-state table of MLEs, weights and fitted curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub inputs_sha256: String,
    pub model: OffspringModel,
    pub result: EstimateResult,
    pub n_steps: u64,
    pub table: Vec<StateRow>,
}

pub fn estimation_report(
    stats: &SufficientStats,
    model: &OffspringModel,
    result: &EstimateResult,
    inputs_sha256: String,
) -> Result<EstimationReport> {
    let theta = &result.theta_hat;
    let z_max = result
        .z_max
        .unwrap_or_else(|| default_fit_z_max(theta.k(), stats.max_state()))
        .max(stats.max_state() as usize);
    let up = m_up_curve(model, theta, z_max)?;
    let w = weights(stats, result.scheme)?;
    let table = stats
        .visits
        .keys()
        .map(|&z| {
            Ok(StateRow {
                z,
                m_hat: stats.mle_m(z),
                weight: w.get(&z).copied().unwrap_or(0.0),
                m_up: up[z as usize - 1],
                m: model.offspring_mean(z, theta)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EstimationReport {
        inputs_sha256,
        model: model.clone(),
        result: result.clone(),
        n_steps: stats.n_steps,
        table,
    })
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Writes to `path`, or to standard output when there is none.
pub fn emit(path: Option<&Path>, contents: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, contents)?;
        }
        None => {
            use std::io::Write;
            let mut out = std::io::stdout().lock();
            out.write_all(contents.as_bytes())?;
        }
    }
    Ok(())
}
