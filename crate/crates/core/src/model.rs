//! Parametric offspring families.
//!
//! Two shapes of offspring law are supported:
//!
//! * zero-inflated: with probability `1 - r(z, θ)` an individual has no
//!   offspring, otherwise it draws from a base distribution `b` of mean `μ`;
//! * robin: each adult survives to the next year with probability `1 - d`
//!   and, independently, reproduces with probability `r(z, θ)`, producing a
//!   number of surviving young drawn from `b`.
//!
//! In both shapes `r` follows either a Beverton-Holt or a Ricker curve, so the
//! first component of θ is always the carrying capacity `K`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tail mass below which the geometric base distribution is truncated.
pub const GEOMETRIC_TAIL: f64 = 1e-14;

/// Adult survival probability `1 - d` for the black robin model.
pub const ROBIN_SURVIVAL: f64 = 0.6861;
/// Per-trial success probability of the binomial young-count approximation.
pub const ROBIN_P: f64 = 0.1988;
/// Number of trials of the binomial young-count approximation.
pub const ROBIN_TRIALS: u32 = 5;
/// Empirical distribution of surviving female young per successful attempt.
pub const ROBIN_EMPIRICAL_B: [f64; 8] = [
    0.3130, 0.4544, 0.1758, 0.0431, 0.0106, 0.0024, 0.0006, 0.0001,
];

/// Parameter vector θ. The first component is always the carrying capacity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Theta(pub Vec<f64>);

impl Theta {
    pub fn new(values: Vec<f64>) -> Self {
        Theta(values)
    }

    pub fn k(&self) -> f64 {
        self.0[0]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Copy with component `j` shifted by `delta`.
    pub fn shifted(&self, j: usize, delta: f64) -> Theta {
        let mut v = self.0.clone();
        v[j] += delta;
        Theta(v)
    }
}

impl From<Vec<f64>> for Theta {
    fn from(v: Vec<f64>) -> Self {
        Theta(v)
    }
}

/// How the reproduction probability depends on the population size.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Zero-inflated base law, `r = K / (K + (μ - 1) z)`.
    #[serde(rename = "bh")]
    BevertonHolt,
    /// Zero-inflated base law, `r = μ^(-z/K)`.
    Ricker,
    /// Robin survival model, `r = v K / ((μ - 1) z + K)` with `μ = 5 p v / d`.
    #[serde(rename = "robin-bh")]
    RobinBevertonHolt,
    /// Robin survival model, `r = v μ^(-z/K)`.
    RobinRicker,
}

impl Family {
    pub fn is_robin(self) -> bool {
        matches!(self, Family::RobinBevertonHolt | Family::RobinRicker)
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::BevertonHolt => "bh",
            Family::Ricker => "ricker",
            Family::RobinBevertonHolt => "robin-bh",
            Family::RobinRicker => "robin-ricker",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bh" | "beverton-holt" => Ok(Family::BevertonHolt),
            "ricker" => Ok(Family::Ricker),
            "robin-bh" => Ok(Family::RobinBevertonHolt),
            "robin-ricker" => Ok(Family::RobinRicker),
            other => Err(Error::Parse(format!("unknown family `{other}`"))),
        }
    }
}

/// Base (successful-reproduction) offspring distribution.
///
/// For zero-inflated families the parametric variants take their free
/// parameter from θ₁: the mean for `Geometric`, `b₂ = v` for
/// `BinarySplitting` and the success probability for `Binomial`. For robin
/// families the base is fixed by the robin constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BaseSpec {
    /// Support {0, 1, ...}, `P(k) = (1/(1+μ)) (μ/(1+μ))^k`, mean μ.
    Geometric,
    /// `b₀ = 1 - v`, `b₂ = v`, mean `2v`.
    #[serde(rename = "binary")]
    BinarySplitting,
    Binomial { trials: u32 },
    Empirical { pmf: Vec<f64> },
}

impl BaseSpec {
    pub fn name(&self) -> &'static str {
        match self {
            BaseSpec::Geometric => "geometric",
            BaseSpec::BinarySplitting => "binary",
            BaseSpec::Binomial { .. } => "binomial",
            BaseSpec::Empirical { .. } => "empirical",
        }
    }
}

/// What kind of quantity a component of θ is; drives validation and the
/// default optimizer box.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    CarryingCapacity,
    Probability,
    Mean,
}

/// Constants of the robin survival model.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobinConstants {
    /// Adult survival probability `1 - d`.
    pub survival: f64,
    /// Binomial success probability `p` of the young count.
    pub p: f64,
    /// Binomial trial count of the young count.
    pub trials: u32,
}

impl Default for RobinConstants {
    fn default() -> Self {
        RobinConstants {
            survival: ROBIN_SURVIVAL,
            p: ROBIN_P,
            trials: ROBIN_TRIALS,
        }
    }
}

impl RobinConstants {
    pub fn death(&self) -> f64 {
        1.0 - self.survival
    }
}

/// A concrete base distribution for one θ.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseDistribution {
    pub pmf: Vec<f64>,
    /// Probability beyond the stored support (geometric truncation only).
    pub tail: f64,
    pub mean: f64,
    pub variance: f64,
}

impl BaseDistribution {
    pub fn geometric(mean: f64) -> Result<Self> {
        if !(mean > 0.0) || !mean.is_finite() {
            return Err(Error::ParameterDomain(format!(
                "geometric mean must be positive, got {mean}"
            )));
        }
        let q = mean / (1.0 + mean);
        let mut pmf = Vec::new();
        let mut qk = 1.0;
        // smallest k_max with q^(k_max + 1) < GEOMETRIC_TAIL
        loop {
            pmf.push((1.0 - q) * qk);
            qk *= q;
            if qk < GEOMETRIC_TAIL {
                break;
            }
        }
        Ok(BaseDistribution {
            pmf,
            tail: qk,
            mean,
            variance: mean * (1.0 + mean),
        })
    }

    pub fn binary_splitting(v: f64) -> Result<Self> {
        check_probability("binary splitting b₂", v)?;
        Ok(BaseDistribution {
            pmf: vec![1.0 - v, 0.0, v],
            tail: 0.0,
            mean: 2.0 * v,
            variance: 4.0 * v * (1.0 - v),
        })
    }

    pub fn binomial(trials: u32, p: f64) -> Result<Self> {
        check_probability("binomial p", p)?;
        let n = trials as usize;
        let mut pmf = Vec::with_capacity(n + 1);
        let mut coef = 1.0f64;
        for k in 0..=n {
            if k > 0 {
                coef = coef * (n - k + 1) as f64 / k as f64;
            }
            pmf.push(coef * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32));
        }
        let nf = trials as f64;
        Ok(BaseDistribution {
            pmf,
            tail: 0.0,
            mean: nf * p,
            variance: nf * p * (1.0 - p),
        })
    }

    pub fn empirical(pmf: &[f64]) -> Result<Self> {
        if pmf.is_empty() || pmf.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::ParameterDomain(
                "empirical pmf entries must be finite and non-negative".into(),
            ));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::ParameterDomain(format!(
                "empirical pmf sums to {total}, expected 1"
            )));
        }
        let (mean, second) = moments(pmf);
        Ok(BaseDistribution {
            pmf: pmf.to_vec(),
            tail: 0.0,
            mean,
            variance: second - mean * mean,
        })
    }
}

fn check_probability(what: &str, x: f64) -> Result<()> {
    if x > 0.0 && x <= 1.0 {
        Ok(())
    } else {
        Err(Error::ParameterDomain(format!(
            "{what} must lie in (0, 1], got {x}"
        )))
    }
}

/// First and second raw moments of a pmf indexed from 0.
pub(crate) fn moments(pmf: &[f64]) -> (f64, f64) {
    pmf.iter()
        .enumerate()
        .fold((0.0, 0.0), |(m1, m2), (k, &p)| {
            let k = k as f64;
            (m1 + k * p, m2 + k * k * p)
        })
}

/// Offspring distribution at one population size.
#[derive(Clone, Debug, PartialEq)]
pub struct OffspringPmf {
    pub probabilities: Vec<f64>,
    /// Probability mass beyond the last stored index.
    pub tail_mass: f64,
}

impl OffspringPmf {
    pub fn mean(&self) -> f64 {
        moments(&self.probabilities).0
    }

    pub fn variance(&self) -> f64 {
        let (m1, m2) = moments(&self.probabilities);
        m2 - m1 * m1
    }

    pub fn total(&self) -> f64 {
        self.probabilities.iter().sum::<f64>() + self.tail_mass
    }
}

/// A parametric PSDBP offspring family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffspringModel {
    pub family: Family,
    pub base: BaseSpec,
    #[serde(default)]
    pub robin: RobinConstants,
}

impl fmt::Display for OffspringModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.family, self.base.name())
    }
}

impl OffspringModel {
    pub fn new(family: Family, base: BaseSpec) -> Result<Self> {
        Self::with_robin(family, base, RobinConstants::default())
    }

    pub fn with_robin(family: Family, base: BaseSpec, robin: RobinConstants) -> Result<Self> {
        if family.is_robin() {
            if !matches!(base, BaseSpec::Binomial { .. } | BaseSpec::Empirical { .. }) {
                return Err(Error::ParameterDomain(format!(
                    "robin families need a binomial or empirical base, got {}",
                    base.name()
                )));
            }
            let d = robin.death();
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::ParameterDomain(format!(
                    "robin death probability must lie in (0, 1), got {d}"
                )));
            }
            check_probability("robin p", robin.p)?;
        }
        if let BaseSpec::Empirical { pmf } = &base {
            BaseDistribution::empirical(pmf)?;
        }
        Ok(OffspringModel {
            family,
            base,
            robin,
        })
    }

    /// Zero-inflated Beverton-Holt model with binary-splitting base, θ = (K, v).
    pub fn bh_binary() -> Self {
        OffspringModel::new(Family::BevertonHolt, BaseSpec::BinarySplitting).unwrap()
    }

    /// Zero-inflated model with geometric base, θ = (K, μ).
    pub fn geometric(family: Family) -> Self {
        OffspringModel::new(family, BaseSpec::Geometric).unwrap()
    }

    /// Robin model with the empirical young-count distribution, θ = (K, v).
    pub fn robin_empirical(family: Family) -> Self {
        OffspringModel::new(
            family,
            BaseSpec::Empirical {
                pmf: ROBIN_EMPIRICAL_B.to_vec(),
            },
        )
        .unwrap()
    }

    /// Robin model with the binomial young-count approximation, θ = (K, v).
    pub fn robin_binomial(family: Family) -> Self {
        OffspringModel::new(
            family,
            BaseSpec::Binomial {
                trials: ROBIN_TRIALS,
            },
        )
        .unwrap()
    }

    /// Kinds of the components of θ, in order.
    pub fn param_kinds(&self) -> Vec<ParamKind> {
        let mut kinds = vec![ParamKind::CarryingCapacity];
        if self.family.is_robin() {
            kinds.push(ParamKind::Probability);
        } else {
            match self.base {
                BaseSpec::Geometric => kinds.push(ParamKind::Mean),
                BaseSpec::BinarySplitting | BaseSpec::Binomial { .. } => {
                    kinds.push(ParamKind::Probability)
                }
                BaseSpec::Empirical { .. } => {}
            }
        }
        kinds
    }

    pub fn dim(&self) -> usize {
        self.param_kinds().len()
    }

    pub fn validate(&self, theta: &Theta) -> Result<()> {
        let kinds = self.param_kinds();
        if theta.len() != kinds.len() {
            return Err(Error::ParameterDomain(format!(
                "{} model expects {} parameters, got {}",
                self.family,
                kinds.len(),
                theta.len()
            )));
        }
        for (x, kind) in theta.as_slice().iter().zip(&kinds) {
            let ok = x.is_finite()
                && match kind {
                    ParamKind::CarryingCapacity => *x > 0.0,
                    ParamKind::Probability => *x > 0.0 && *x <= 1.0,
                    ParamKind::Mean => *x > 1.0,
                };
            if !ok {
                return Err(Error::ParameterDomain(format!(
                    "{kind:?} component out of range: {x}"
                )));
            }
        }
        Ok(())
    }

    /// Base distribution `b` at θ.
    pub fn base_distribution(&self, theta: &Theta) -> Result<BaseDistribution> {
        if self.family.is_robin() {
            return match &self.base {
                BaseSpec::Binomial { trials } => BaseDistribution::binomial(*trials, self.robin.p),
                BaseSpec::Empirical { pmf } => BaseDistribution::empirical(pmf),
                _ => unreachable!("checked at construction"),
            };
        }
        match &self.base {
            BaseSpec::Geometric => BaseDistribution::geometric(theta.0[1]),
            BaseSpec::BinarySplitting => BaseDistribution::binary_splitting(theta.0[1]),
            BaseSpec::Binomial { trials } => BaseDistribution::binomial(*trials, theta.0[1]),
            BaseSpec::Empirical { pmf } => BaseDistribution::empirical(pmf),
        }
    }

    /// The μ entering the reproduction probability. For zero-inflated
    /// families this is the base mean, for robin families `trials·p·v/d`.
    pub fn growth_mean(&self, theta: &Theta, base: &BaseDistribution) -> f64 {
        if self.family.is_robin() {
            self.robin.trials as f64 * self.robin.p * theta.0[1] / self.robin.death()
        } else {
            base.mean
        }
    }

    fn reproduction_with_base(&self, z: u64, theta: &Theta, base: &BaseDistribution) -> f64 {
        let k = theta.k();
        let z = z as f64;
        let mu = self.growth_mean(theta, base);
        let bh = |scale: f64| {
            let denom = k + (mu - 1.0) * z;
            if denom <= 0.0 {
                1.0
            } else {
                scale * k / denom
            }
        };
        let ricker = |scale: f64| scale * (1.0 / mu).powf(z / k);
        let r = match self.family {
            Family::BevertonHolt => bh(1.0),
            Family::Ricker => ricker(1.0),
            Family::RobinBevertonHolt => bh(theta.0[1]),
            Family::RobinRicker => ricker(theta.0[1]),
        };
        if r.is_nan() {
            1.0
        } else {
            r.clamp(0.0, 1.0)
        }
    }

    /// Probability `r(z, θ)` that an individual reproduces successfully.
    pub fn reproduction_probability(&self, z: u64, theta: &Theta) -> Result<f64> {
        check_state(z)?;
        self.validate(theta)?;
        let base = self.base_distribution(theta)?;
        Ok(self.reproduction_with_base(z, theta, &base))
    }

    /// Per-individual law of the zero-inflated part `R·B` (R ~ Bernoulli(r),
    /// B ~ b) and the survival probability added on top for robin families.
    pub(crate) fn factors(&self, z: u64, theta: &Theta) -> Result<RowFactors> {
        let base = self.base_distribution(theta)?;
        let r = self.reproduction_with_base(z, theta, &base);
        let mut zi: Vec<f64> = base.pmf.iter().map(|&b| r * b).collect();
        zi[0] += 1.0 - r;
        Ok(RowFactors {
            zero_inflated: zi,
            zero_inflated_tail: r * base.tail,
            survival: self.family.is_robin().then(|| self.robin.survival),
        })
    }

    /// Offspring pmf `p(z, θ)`. With `k_max = None` the full stored support is
    /// returned; otherwise mass beyond `k_max` is moved into `tail_mass`.
    pub fn offspring_pmf(&self, z: u64, theta: &Theta, k_max: Option<usize>) -> Result<OffspringPmf> {
        check_state(z)?;
        self.validate(theta)?;
        let f = self.factors(z, theta)?;
        let mut probabilities = match f.survival {
            None => f.zero_inflated,
            Some(s) => {
                // effective law of S + R·B with S ~ Bernoulli(1 - d)
                let d = 1.0 - s;
                let mut p = vec![0.0; f.zero_inflated.len() + 1];
                for (k, &q) in f.zero_inflated.iter().enumerate() {
                    p[k] += q * d;
                    p[k + 1] += q * s;
                }
                p
            }
        };
        let mut tail_mass = f.zero_inflated_tail;
        if let Some(k_max) = k_max {
            if probabilities.len() > k_max + 1 {
                tail_mass += probabilities[k_max + 1..].iter().sum::<f64>();
                probabilities.truncate(k_max + 1);
            }
        }
        Ok(OffspringPmf {
            probabilities,
            tail_mass,
        })
    }

    /// Mean offspring `m(z, θ)`.
    pub fn offspring_mean(&self, z: u64, theta: &Theta) -> Result<f64> {
        check_state(z)?;
        self.validate(theta)?;
        let base = self.base_distribution(theta)?;
        let r = self.reproduction_with_base(z, theta, &base);
        if self.family.is_robin() {
            Ok(self.offspring_pmf(z, theta, None)?.mean())
        } else {
            Ok(r * base.mean)
        }
    }

    /// Offspring variance `σ²(z, θ)`.
    pub fn offspring_variance(&self, z: u64, theta: &Theta) -> Result<f64> {
        check_state(z)?;
        self.validate(theta)?;
        let base = self.base_distribution(theta)?;
        let r = self.reproduction_with_base(z, theta, &base);
        if self.family.is_robin() {
            Ok(self.offspring_pmf(z, theta, None)?.variance())
        } else {
            let m = r * base.mean;
            Ok(r * (base.variance + base.mean * base.mean) - m * m)
        }
    }

    /// Carrying capacity `K`, after checking numerically that the mean
    /// offspring crosses 1 around it.
    pub fn carrying_capacity_of(&self, theta: &Theta) -> Result<f64> {
        self.validate(theta)?;
        let k = theta.k();
        if k < 1.0 {
            return Err(Error::ModelMisspecification(format!(
                "carrying capacity {k} < 1 leaves no state below it"
            )));
        }
        let below = self.offspring_mean(k.floor() as u64, theta)?;
        let above = self.offspring_mean(k.ceil() as u64 + 1, theta)?;
        const SLACK: f64 = 1e-12;
        if below + SLACK >= 1.0 && above <= 1.0 + SLACK {
            Ok(k)
        } else {
            Err(Error::ModelMisspecification(format!(
                "mean offspring does not cross 1 at K = {k}: m(floor K) = {below}, m(ceil K + 1) = {above}"
            )))
        }
    }
}

pub(crate) struct RowFactors {
    pub zero_inflated: Vec<f64>,
    pub zero_inflated_tail: f64,
    pub survival: Option<f64>,
}

fn check_state(z: u64) -> Result<()> {
    if z == 0 {
        Err(Error::Domain("population size must be at least 1".into()))
    } else {
        Ok(())
    }
}
