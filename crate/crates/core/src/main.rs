use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use psdbp::asymptotics::{confidence_ellipse, confidence_interval, covariance, default_z_max, CovarianceReport};
use psdbp::error::{Error, Result};
use psdbp::estimate::{estimate, sufficient_stats, OptConfig, Target, WeightScheme};
use psdbp::experiments::{run, summary_csv, ExperimentConfig};
use psdbp::io::{emit, estimation_report, fit_census, read_census_csv, read_trajectories_csv, robin_model, sha256_hex, to_json, RobinBase};
use psdbp::model::{BaseSpec, Family, OffspringModel, ParamKind, RobinConstants, Theta};
use psdbp::qprocess::{q_process, CurveOptions};
use psdbp::simulate::{batch_csv, simulate_batch, SimConfig};

#[derive(Parser)]
#[command(name = "psdbp", version, about = "Population-size-dependent branching processes: simulation and estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trajectories as a long `rep,t,z` CSV.
    Simulate(SimulateArgs),
    /// Fit θ to trajectories read from CSV.
    Estimate(EstimateArgs),
    /// Tabulate m, m↑, σ²↑ and u∘v.
    DumpMup(DumpArgs),
    /// Asymptotic covariance, intervals and ellipses.
    Asymptotics(AsymptoticsArgs),
    /// Run a Monte Carlo study from a TOML file.
    Experiment(ExperimentArgs),
    /// Fit a black-robin model to a `year,count` census.
    FitCensus(CensusArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// bh, ricker, robin-bh or robin-ricker.
    #[arg(long, default_value = "bh")]
    family: Family,
    /// geometric, binary, binomial or empirical. Defaults to binary, or
    /// empirical for the robin families.
    #[arg(long)]
    base: Option<String>,
    /// Trials of a binomial base.
    #[arg(long)]
    trials: Option<u32>,
    /// Comma-separated pmf of an empirical base.
    #[arg(long, value_delimiter = ',')]
    pmf: Option<Vec<f64>>,
    /// Adult survival of the robin families.
    #[arg(long)]
    survival: Option<f64>,
    /// Binomial success probability of the robin families.
    #[arg(long = "robin-p")]
    robin_p: Option<f64>,
}

impl ModelArgs {
    fn model(&self) -> Result<OffspringModel> {
        let base = self
            .base
            .clone()
            .unwrap_or_else(|| if self.family.is_robin() { "empirical" } else { "binary" }.into());
        let spec = match base.as_str() {
            "geometric" => BaseSpec::Geometric,
            "binary" => BaseSpec::BinarySplitting,
            "binomial" => BaseSpec::Binomial {
                trials: self.trials.unwrap_or(psdbp::model::ROBIN_TRIALS),
            },
            "empirical" => BaseSpec::Empirical {
                pmf: match &self.pmf {
                    Some(p) => p.clone(),
                    None if self.family.is_robin() => psdbp::model::ROBIN_EMPIRICAL_B.to_vec(),
                    None => return Err(Error::Parse("an empirical base needs --pmf".into())),
                },
            },
            other => return Err(Error::Parse(format!("unknown base `{other}`"))),
        };
        let mut robin = RobinConstants::default();
        if let Some(s) = self.survival {
            robin.survival = s;
        }
        if let Some(p) = self.robin_p {
            robin.p = p;
        }
        if let Some(t) = self.trials {
            robin.trials = t;
        }
        OffspringModel::with_robin(self.family, spec, robin)
    }
}

#[derive(Args, Clone)]
struct ThetaArgs {
    /// Carrying capacity.
    #[arg(long = "K")]
    k: f64,
    /// Probability parameter (binary, binomial and robin models).
    #[arg(long)]
    v: Option<f64>,
    /// Mean parameter (geometric base).
    #[arg(long)]
    mu: Option<f64>,
}

impl ThetaArgs {
    fn theta(&self, model: &OffspringModel) -> Result<Theta> {
        let mut values = vec![self.k];
        for kind in model.param_kinds().into_iter().skip(1) {
            let (x, flag) = match kind {
                ParamKind::Probability => (self.v, "--v"),
                ParamKind::Mean => (self.mu, "--mu"),
                ParamKind::CarryingCapacity => unreachable!(),
            };
            values.push(x.ok_or_else(|| Error::Parse(format!("this model needs {flag}")))?);
        }
        let theta = Theta(values);
        model.validate(&theta)?;
        Ok(theta)
    }
}

#[derive(Args, Clone)]
struct FitArgs {
    /// w1, w2 or capped:<z>.
    #[arg(long, default_value = "w2")]
    weights: WeightScheme,
    /// qprocess or raw.
    #[arg(long, default_value = "qprocess")]
    target: Target,
    /// Truncation of Q for the Q-process target.
    #[arg(long)]
    zmax: Option<usize>,
    /// Multistart lattice points per dimension.
    #[arg(long, default_value_t = 5)]
    grid: usize,
    /// Lattice points refined for the Q-process target.
    #[arg(long, default_value_t = 2)]
    refine_top: usize,
}

impl FitArgs {
    fn config(&self) -> OptConfig {
        OptConfig {
            grid: self.grid,
            refine_top: self.refine_top,
            z_max: self.zmax,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    theta: ThetaArgs,
    /// Initial population size.
    #[arg(long = "N")]
    initial: u64,
    /// Number of generations.
    #[arg(long = "n")]
    horizon: usize,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long)]
    seed: u64,
    /// Keep only trajectories alive at generation n.
    #[arg(long)]
    survive: bool,
    #[arg(long, default_value_t = 1_000_000)]
    max_attempts: u64,
    /// Explosion cap on the population size.
    #[arg(long, default_value_t = psdbp::simulate::DEFAULT_CAP)]
    cap: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    /// CSV with `t,z` or `rep,t,z` columns.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    theta: ThetaArgs,
    #[arg(long)]
    zmax: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AsymptoticsArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    theta: ThetaArgs,
    #[arg(long, default_value = "w2")]
    weights: WeightScheme,
    /// Truncation; defaults to max(4K, 64).
    #[arg(long)]
    zmax: Option<usize>,
    /// Sample size for intervals and ellipses.
    #[arg(long)]
    n: Option<u64>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Write the confidence ellipse as `phi,x,y` CSV here (needs --n).
    #[arg(long)]
    ellipse: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory in the config file.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Where to write the summary CSV; standard output by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CensusArgs {
    /// CSV with `year,count` columns.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "robin-bh")]
    family: Family,
    /// empirical or binomial young-count distribution.
    #[arg(long, default_value = "empirical")]
    base: String,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct AsymptoticsOutput {
    covariance: CovarianceReport,
    n: Option<u64>,
    level: f64,
    intervals: Option<Vec<(f64, f64)>>,
}

fn simulate_cmd(a: SimulateArgs) -> Result<()> {
    let model = a.model.model()?;
    let theta = a.theta.theta(&model)?;
    let config = SimConfig {
        initial_size: a.initial,
        horizon: a.horizon,
        replications: a.reps,
        condition_on_survival: a.survive,
        max_attempts: a.max_attempts,
        seed: a.seed,
        cap: a.cap,
    };
    let batch = simulate_batch(&config, &model, &theta)?;
    emit(a.out.as_deref(), &batch_csv(&batch))
}

fn estimate_cmd(a: EstimateArgs) -> Result<()> {
    let model = a.model.model()?;
    let bytes = std::fs::read(&a.input)?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| Error::Parse(e.to_string()))?;
    let paths = read_trajectories_csv(&text)?;
    let stats = sufficient_stats(paths.iter().map(|p| p.as_slice()))?;
    let result = estimate(&stats, &model, a.fit.weights, a.fit.target, &a.fit.config())?;
    let report = estimation_report(&stats, &model, &result, sha256_hex(&bytes))?;
    emit(a.out.as_deref(), &to_json(&report)?)
}

fn dump_cmd(a: DumpArgs) -> Result<()> {
    let model = a.model.model()?;
    let theta = a.theta.theta(&model)?;
    let qp = q_process(&model, &theta, a.zmax, CurveOptions::default())?;
    let mut out = String::from("z,m,m_up,sigma2_up,uv\n");
    for z in 1..=a.zmax {
        out.push_str(&format!(
            "{z},{},{},{},{}\n",
            model.offspring_mean(z as u64, &theta)?,
            qp.m_up(z),
            qp.sigma2_up(z),
            qp.stationary[z - 1]
        ));
    }
    emit(a.out.as_deref(), &out)
}

fn asymptotics_cmd(a: AsymptoticsArgs) -> Result<()> {
    let model = a.model.model()?;
    let theta = a.theta.theta(&model)?;
    let z_max = a.zmax.unwrap_or_else(|| default_z_max(&theta));
    let report = covariance(&model, &theta, a.weights, z_max)?;
    let intervals = match a.n {
        Some(n) => Some(confidence_interval(&theta, &report.beta, n, a.level)?),
        None => None,
    };
    if let Some(path) = &a.ellipse {
        let n = a.n.ok_or_else(|| Error::Domain("--ellipse needs --n".into()))?;
        let mut csv = String::from("phi,x,y\n");
        for (phi, x, y) in confidence_ellipse(&theta, &report.beta, n, a.level, a.points)? {
            csv.push_str(&format!("{phi},{x},{y}\n"));
        }
        emit(Some(path), &csv)?;
    }
    let out = AsymptoticsOutput {
        covariance: report,
        n: a.n,
        level: a.level,
        intervals,
    };
    emit(a.out.as_deref(), &to_json(&out)?)
}

fn experiment_cmd(a: ExperimentArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config)?;
    let mut config = ExperimentConfig::from_toml(&text)?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(d) = a.out_dir {
        config.output_dir = Some(d);
    }
    let out = run(&config)?;
    emit(a.out.as_deref(), &summary_csv(&out.summary))
}

fn census_cmd(a: CensusArgs) -> Result<()> {
    let base = match a.base.as_str() {
        "empirical" => RobinBase::Empirical,
        "binomial" => RobinBase::Binomial,
        other => return Err(Error::Parse(format!("unknown robin base `{other}`"))),
    };
    let model = robin_model(a.family, base)?;
    let bytes = std::fs::read(&a.input)?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| Error::Parse(e.to_string()))?;
    let series = read_census_csv(&text, &a.input.display().to_string())?;
    let result = fit_census(&series, &model, a.fit.weights, a.fit.target, &a.fit.config())?;
    let mut stats = psdbp::estimate::SufficientStats::default();
    stats.add_trajectory(&series.counts);
    let report = estimation_report(&stats, &model, &result, sha256_hex(&bytes))?;
    emit(a.out.as_deref(), &to_json(&report)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate_cmd(a),
        Command::Estimate(a) => estimate_cmd(a),
        Command::DumpMup(a) => dump_cmd(a),
        Command::Asymptotics(a) => asymptotics_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
        Command::FitCensus(a) => census_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{record}");
            ExitCode::from(1)
        }
    }
}
