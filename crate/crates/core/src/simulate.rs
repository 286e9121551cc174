//! Trajectory simulation, optionally conditioned on survival by rejection.
//!
//! Each individual draws its offspring count from the law at the current
//! population size, through an alias table cached per visited size.
//!
//! Batches use one ChaCha8 stream per replication: replication `j` of a batch
//! with master seed `s` draws from `ChaCha8Rng::seed_from_u64(s)` with its
//! stream set to `j`. Output therefore does not depend on scheduling.

use std::collections::HashMap;

use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{OffspringModel, Theta};

pub const DEFAULT_CAP: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `Z_0, …, Z_n`.
    pub states: Vec<u64>,
    pub seed: u64,
    /// Replication index within its batch (the RNG stream).
    pub stream: u64,
    /// Full trajectories generated before this one was accepted, itself included.
    pub attempts: u64,
    pub model: String,
    pub theta: Theta,
}

impl Trajectory {
    pub fn last(&self) -> u64 {
        *self.states.last().unwrap_or(&0)
    }

    pub fn survived(&self) -> bool {
        self.last() > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub initial_size: u64,
    pub horizon: usize,
    pub replications: usize,
    pub condition_on_survival: bool,
    pub max_attempts: u64,
    pub seed: u64,
    #[serde(default = "default_cap")]
    pub cap: u64,
}

fn default_cap() -> u64 {
    DEFAULT_CAP
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.initial_size == 0 {
            return Err(Error::Domain("initial size must be at least 1".into()));
        }
        if self.horizon == 0 || self.replications == 0 {
            return Err(Error::Domain("horizon and replications must be positive".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Domain("max_attempts must be at least 1".into()));
        }
        Ok(())
    }
}

/// RNG for replication `stream` of a batch seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Offspring samplers for one model and θ, built lazily per population size.
pub struct Sampler<'a> {
    model: &'a OffspringModel,
    theta: &'a Theta,
    cap: u64,
    tables: HashMap<u64, WeightedAliasIndex<f64>>,
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a OffspringModel, theta: &'a Theta, cap: u64) -> Result<Self> {
        model.validate(theta)?;
        Ok(Sampler {
            model,
            theta,
            cap,
            tables: HashMap::new(),
        })
    }

    fn table(&mut self, z: u64) -> Result<&WeightedAliasIndex<f64>> {
        if !self.tables.contains_key(&z) {
            // the discarded tail is below 1e-14 for geometric bases and 0 otherwise
            let pmf = self.model.offspring_pmf(z, self.theta, None)?;
            let table = WeightedAliasIndex::new(pmf.probabilities)
                .map_err(|e| Error::Domain(format!("offspring law at z = {z}: {e}")))?;
            self.tables.insert(z, table);
        }
        Ok(&self.tables[&z])
    }

    /// One generation from `z` individuals.
    pub fn step<R: Rng + ?Sized>(&mut self, z: u64, rng: &mut R) -> Result<u64> {
        if z == 0 {
            return Ok(0);
        }
        let table = self.table(z)?;
        let mut next = 0u64;
        for _ in 0..z {
            next += table.sample(rng) as u64;
        }
        Ok(next)
    }

    /// `Z_0 = initial, …, Z_n`. Stops drawing once extinct.
    pub fn path<R: Rng + ?Sized>(&mut self, initial: u64, n: usize, rng: &mut R) -> Result<Vec<u64>> {
        if initial == 0 {
            return Err(Error::Domain("initial size must be at least 1".into()));
        }
        let mut states = Vec::with_capacity(n + 1);
        states.push(initial);
        let mut z = initial;
        for step in 1..=n {
            z = self.step(z, rng)?;
            if z > self.cap {
                return Err(Error::Explosion { cap: self.cap, step });
            }
            states.push(z);
        }
        Ok(states)
    }

    /// Regenerates whole paths until `Z_n > 0`. Returns the path and the
    /// number of attempts.
    pub fn surviving_path<R: Rng + ?Sized>(
        &mut self,
        initial: u64,
        n: usize,
        max_attempts: u64,
        rng: &mut R,
    ) -> Result<(Vec<u64>, u64)> {
        for attempt in 1..=max_attempts {
            let path = self.path(initial, n, rng)?;
            if path[n] > 0 {
                return Ok((path, attempt));
            }
        }
        Err(Error::SurvivalRejection {
            attempts: max_attempts,
            survival_fraction: 0.0,
        })
    }
}

fn trajectory(states: Vec<u64>, seed: u64, stream: u64, attempts: u64, model: &OffspringModel, theta: &Theta) -> Trajectory {
    Trajectory {
        states,
        seed,
        stream,
        attempts,
        model: model.to_string(),
        theta: theta.clone(),
    }
}

/// One unconditioned trajectory of length `n + 1`.
pub fn simulate<R: Rng + ?Sized>(
    model: &OffspringModel,
    theta: &Theta,
    initial: u64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<u64>> {
    Sampler::new(model, theta, DEFAULT_CAP)?.path(initial, n, rng)
}

/// One trajectory with `Z_n > 0`, by rejection. Returns the attempt count.
pub fn simulate_surviving<R: Rng + ?Sized>(
    model: &OffspringModel,
    theta: &Theta,
    initial: u64,
    n: usize,
    max_attempts: u64,
    rng: &mut R,
) -> Result<(Vec<u64>, u64)> {
    Sampler::new(model, theta, DEFAULT_CAP)?.surviving_path(initial, n, max_attempts, rng)
}

fn replication(config: &SimConfig, model: &OffspringModel, theta: &Theta, j: u64) -> Result<Trajectory> {
    let mut rng = stream_rng(config.seed, j);
    let mut sampler = Sampler::new(model, theta, config.cap)?;
    let (states, attempts) = if config.condition_on_survival {
        sampler.surviving_path(config.initial_size, config.horizon, config.max_attempts, &mut rng)?
    } else {
        (sampler.path(config.initial_size, config.horizon, &mut rng)?, 1)
    };
    Ok(trajectory(states, config.seed, j, attempts, model, theta))
}

/// `config.replications` independent trajectories, replication `j` on stream `j`.
pub fn simulate_batch(config: &SimConfig, model: &OffspringModel, theta: &Theta) -> Result<Vec<Trajectory>> {
    config.validate()?;
    model.validate(theta)?;
    let results: Vec<Result<Trajectory>> = (0..config.replications as u64)
        .into_par_iter()
        .map(|j| replication(config, model, theta, j))
        .collect();
    let completed = results.iter().filter(|r| r.is_ok()).count();
    let mut out = Vec::with_capacity(results.len());
    for (j, r) in results.into_iter().enumerate() {
        match r {
            Ok(t) => out.push(t),
            Err(e) => {
                return Err(Error::BatchAborted {
                    replication: j,
                    completed,
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(out)
}

/// Long-format CSV `rep,t,z`.
pub fn batch_csv(trajectories: &[Trajectory]) -> String {
    let mut out = String::from("rep,t,z\n");
    for t in trajectories {
        for (i, z) in t.states.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", t.stream, i, z));
        }
    }
    out
}

/// Two-column CSV `t,z`.
pub fn trajectory_csv(states: &[u64]) -> String {
    let mut out = String::from("t,z\n");
    for (i, z) in states.iter().enumerate() {
        out.push_str(&format!("{i},{z}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BaseSpec, Family};
    use proptest::prelude::*;

    fn unit_model() -> OffspringModel {
        OffspringModel::new(Family::BevertonHolt, BaseSpec::Empirical { pmf: vec![0.0, 1.0] }).unwrap()
    }

    fn dead_model() -> OffspringModel {
        OffspringModel::new(Family::BevertonHolt, BaseSpec::Empirical { pmf: vec![1.0] }).unwrap()
    }

    #[test]
    fn deterministic_models() {
        let mut rng = stream_rng(1, 0);
        let k = Theta(vec![10.0]);
        assert_eq!(simulate(&unit_model(), &k, 3, 5, &mut rng).unwrap(), vec![3; 6]);
        assert_eq!(simulate(&dead_model(), &k, 3, 3, &mut rng).unwrap(), vec![3, 0, 0, 0]);
        let (path, attempts) = simulate_surviving(&unit_model(), &k, 3, 5, 10, &mut rng).unwrap();
        assert_eq!((path, attempts), (vec![3; 6], 1));
        let err = simulate_surviving(&dead_model(), &k, 3, 2, 10, &mut rng).unwrap_err();
        assert!(matches!(err, Error::SurvivalRejection { attempts: 10, .. }));
    }

    #[test]
    fn seeded_runs_repeat() {
        let model = OffspringModel::bh_binary();
        let theta = Theta(vec![100.0, 0.6]);
        let a = simulate(&model, &theta, 2, 25, &mut stream_rng(7, 3)).unwrap();
        let b = simulate(&model, &theta, 2, 25, &mut stream_rng(7, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batches() {
        let config = SimConfig {
            initial_size: 4,
            horizon: 6,
            replications: 3,
            condition_on_survival: false,
            max_attempts: 1,
            seed: 11,
            cap: DEFAULT_CAP,
        };
        let k = Theta(vec![10.0]);
        let b = simulate_batch(&config, &unit_model(), &k).unwrap();
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|t| t.states == vec![4; 7]));

        let model = OffspringModel::geometric(Family::Ricker);
        let theta = Theta(vec![40.0, 2.0]);
        let config = SimConfig {
            replications: 40,
            condition_on_survival: true,
            max_attempts: 1000,
            horizon: 30,
            ..config
        };
        let first = simulate_batch(&config, &model, &theta).unwrap();
        let second = simulate_batch(&config, &model, &theta).unwrap();
        assert_eq!(first, second);
        assert!(first.iter().all(|t| t.survived()));
        // sequential generation gives the same streams
        for t in &first {
            let again = replication(&config, &model, &theta, t.stream).unwrap();
            assert_eq!(&again, t);
        }
    }

    #[test]
    fn aborted_batch_reports_progress() {
        let config = SimConfig {
            initial_size: 1,
            horizon: 3,
            replications: 5,
            condition_on_survival: true,
            max_attempts: 4,
            seed: 0,
            cap: DEFAULT_CAP,
        };
        match simulate_batch(&config, &dead_model(), &Theta(vec![5.0])) {
            Err(Error::BatchAborted { replication, completed, source }) => {
                assert_eq!((replication, completed), (0, 0));
                assert!(matches!(*source, Error::SurvivalRejection { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn explosion_cap() {
        let model = OffspringModel::geometric(Family::BevertonHolt);
        let theta = Theta(vec![1e9, 20.0]);
        let mut sampler = Sampler::new(&model, &theta, 1000).unwrap();
        let err = sampler.path(50, 10, &mut stream_rng(0, 0)).unwrap_err();
        assert!(matches!(err, Error::Explosion { cap: 1000, .. }));
    }

    #[test]
    fn one_step_mean() {
        // sample mean of Z_1 from z against z m(z), within 4 standard errors
        let model = OffspringModel::bh_binary();
        let theta = Theta(vec![100.0, 0.6]);
        let z = 60;
        let mut sampler = Sampler::new(&model, &theta, DEFAULT_CAP).unwrap();
        let mut rng = stream_rng(5, 0);
        let reps = 20_000;
        let draws: Vec<f64> = (0..reps).map(|_| sampler.step(z, &mut rng).unwrap() as f64).collect();
        let mean = draws.iter().sum::<f64>() / reps as f64;
        let want = z as f64 * model.offspring_mean(z, &theta).unwrap();
        let sd = (z as f64 * model.offspring_variance(z, &theta).unwrap() / reps as f64).sqrt();
        assert!((mean - want).abs() < 4.0 * sd, "{mean} vs {want} ± {sd}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn zero_is_absorbing(seed in any::<u64>(), k in 2.0f64..30.0, v in 0.5f64..0.9) {
            let model = OffspringModel::bh_binary();
            let theta = Theta(vec![k, v]);
            let path = simulate(&model, &theta, 3, 40, &mut stream_rng(seed, 0)).unwrap();
            if let Some(first_zero) = path.iter().position(|&z| z == 0) {
                prop_assert!(path[first_zero..].iter().all(|&z| z == 0));
            }
        }
    }
}
