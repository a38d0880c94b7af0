use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fsde_core::estimators::{
    default_x_grid, estimate_grid, schedule_eval, BandwidthRule, BandwidthSchedule, EpsilonRule, Kernel,
};
use fsde_core::fgn::{sample_fbm, FbmMethod, HurstIndex};
use fsde_core::gaussdiag::{autocorr_double_integral, empirical_autocorrelation, mehler_check};
use fsde_core::grid::{SeedSpec, TimeGrid};
use fsde_core::harness::{run_experiment, ExperimentConfig, ExperimentKind};
use fsde_core::io::{read_paths, write_coupled, write_estimates, write_path};
use fsde_core::sde::{solve_euler, CoupledPaths, DriftModel, SdeConfig, StationarySampler};

#[derive(Parser)]
#[command(name = "fsde", version, about = "Simulation and drift estimation for fractional SDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a fractional Brownian motion path.
    SimulateFbm(FbmArgs),
    /// Solve the SDE, or a coupled pair when --epsilon is given.
    SimulateSde(SdeArgs),
    /// Kernel drift estimates on an x-grid.
    EstimateDrift(EstimateArgs),
    /// Gaussian diagnostics.
    Check {
        #[command(subcommand)]
        check: Check,
    },
    /// Run a Monte Carlo experiment; exits 0 iff every verdict passes.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    horizon: f64,
    /// Time step; give this or --steps.
    #[arg(long, conflicts_with = "steps")]
    step: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
}

impl GridArgs {
    fn grid(&self) -> Result<TimeGrid> {
        Ok(match (self.step, self.steps) {
            (Some(dt), None) => TimeGrid::with_step(self.horizon, dt)?,
            (None, Some(n)) => TimeGrid::new(self.horizon, n)?,
            _ => bail!("give exactly one of --step and --steps"),
        })
    }
}

#[derive(Args)]
struct FbmArgs {
    #[arg(long)]
    hurst: f64,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value = "fft")]
    method: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    stream: u64,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DriftName {
    Linear,
    Tanh,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long = "model", alias = "drift", value_name = "MODEL", value_enum, default_value = "linear")]
    drift: DriftName,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Strength of the tanh term.
    #[arg(long, default_value_t = 1.0)]
    a: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.7)]
    hurst: f64,
}

impl ModelArgs {
    fn drift(&self) -> Result<DriftModel> {
        Ok(match self.drift {
            DriftName::Linear => DriftModel::linear(self.lambda)?,
            DriftName::Tanh => DriftModel::tanh_dissipative(self.lambda, self.a)?,
        })
    }

    fn config(&self, x0: f64, grid: TimeGrid) -> Result<SdeConfig> {
        Ok(SdeConfig::new(self.drift()?, self.sigma, x0, grid, HurstIndex::new(self.hurst)?)?)
    }
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    x0: f64,
    /// Start from the stationary regime after this burn-in time (replaces --x0).
    #[arg(long)]
    burn_in: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    stream: u64,
}

#[derive(Args)]
struct SdeArgs {
    #[command(flatten)]
    sim: SimArgs,
    /// Offset of the shifted path; writes `t,base,shifted,log_gap`.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn simulate(sim: &SimArgs, epsilon: Option<f64>) -> Result<(SdeConfig, fsde_core::grid::Path, Option<CoupledPaths>)> {
    let cfg = sim.model.config(sim.x0, sim.grid.grid()?)?;
    let seed = SeedSpec::new(sim.seed, sim.stream);
    let (path, noise) = if let Some(burn_in) = sim.burn_in {
        let s = StationarySampler::new(cfg.clone(), burn_in)?.sample(seed)?;
        (s.path, s.noise)
    } else {
        let noise = sample_fbm(FbmMethod::Fft, sim.model.hurst, cfg.grid, seed)?;
        (solve_euler(&cfg, &noise)?, noise)
    };
    let coupled = match epsilon {
        Some(eps) => Some(fsde_core::sde::solve_coupled(&cfg.with_x0(path.first()), eps, &noise)?),
        None => None,
    };
    Ok((cfg, path, coupled))
}

#[derive(Args)]
struct EstimateArgs {
    /// Coupled path file with columns `t,base,shifted[,log_gap]`.
    #[arg(long, conflicts_with = "simulate")]
    input: Option<PathBuf>,
    /// Simulate a stationary coupled pair instead of reading one.
    #[arg(long)]
    simulate: bool,
    #[command(flatten)]
    sim: EstimateSim,
    /// Evaluation points (repeat or comma-separate); deciles of the path when omitted.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x: Vec<f64>,
    #[arg(long, default_value = "power")]
    bandwidth: String,
    #[arg(long, default_value = "squared")]
    epsilon: String,
    #[arg(long, default_value = "biweight")]
    kernel: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateSim {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    step: f64,
    #[arg(long)]
    burn_in: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    stream: u64,
}

#[derive(Subcommand)]
enum Check {
    /// Monte Carlo check of E[H_q(U) H_q(V)] = q! rho^q.
    Mehler {
        #[arg(long)]
        q: usize,
        #[arg(long, allow_negative_numbers = true)]
        rho: f64,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Growth of the autocorrelation double integral between T and 2T.
    Autocorr {
        #[arg(long, default_value = "ou")]
        model: String,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long)]
        hurst: f64,
        #[arg(long)]
        horizon: f64,
        #[arg(long, default_value_t = 0.05)]
        step: f64,
        #[arg(long, default_value_t = 20)]
        replications: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    kind: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn output(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn estimate(args: &EstimateArgs) -> Result<()> {
    let kernel: Kernel = args.kernel.parse()?;
    let schedule = BandwidthSchedule::new(args.bandwidth.parse::<BandwidthRule>()?, args.epsilon.parse::<EpsilonRule>()?);
    let hurst = HurstIndex::new(args.sim.model.hurst)?;
    let sigma = args.sim.model.sigma;
    let coupled = match (&args.input, args.simulate) {
        (Some(path), false) => {
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let cp = read_paths(BufReader::new(file))?.into_coupled()?;
            let (_, eps) = schedule_eval(&schedule, cp.base.grid().horizon(), hurst)?;
            if args.epsilon != "squared" && (eps - cp.epsilon).abs() > 1e-9 * eps {
                bail!("--epsilon {eps} disagrees with the offset {} in the input file", cp.epsilon);
            }
            cp
        }
        (None, true) => {
            let horizon = args.sim.horizon.context("--simulate needs --horizon")?;
            let grid = TimeGrid::with_step(horizon, args.sim.step)?;
            let cfg = args.sim.model.config(0.0, grid)?;
            let (_, eps) = schedule_eval(&schedule, horizon, hurst)?;
            let burn = args.sim.burn_in.unwrap_or(20.0 / cfg.drift.dissipativity());
            let s = StationarySampler::new(cfg.clone(), burn)?.sample(SeedSpec::new(args.sim.seed, args.sim.stream))?;
            s.coupled(&cfg, eps)?
        }
        _ => bail!("give exactly one of --input and --simulate"),
    };
    let (h, _) = schedule_eval(&schedule, coupled.base.grid().horizon(), hurst)?;
    let xs = if args.x.is_empty() {
        default_x_grid(coupled.base.values(), &[])
    } else {
        args.x.clone()
    };
    let est = estimate_grid(&coupled, sigma, hurst, &xs, h, &kernel)?;
    let mut w = output(&args.out)?;
    write_estimates(&mut w, &est)?;
    w.flush()?;
    Ok(())
}

fn check(c: &Check) -> Result<bool> {
    match *c {
        Check::Mehler { q, rho, samples, seed } => {
            let m = mehler_check(q, rho, samples, SeedSpec::new(seed, 0))?;
            let pass = m.within(5.0);
            println!("verdict,q,rho,samples,empirical,predicted,stderr");
            println!(
                "{},{q},{rho},{samples},{},{},{}",
                if pass { "PASS" } else { "FAIL" },
                m.empirical,
                m.predicted,
                m.stderr
            );
            Ok(pass)
        }
        Check::Autocorr {
            ref model,
            lambda,
            sigma,
            hurst,
            horizon,
            step,
            replications,
            seed,
        } => {
            if model != "ou" {
                bail!("unknown model `{model}` (only `ou` is supported)");
            }
            let mean_integral = |t: f64, k: u64| -> Result<f64> {
                let grid = TimeGrid::with_step(t, step)?;
                let cfg = SdeConfig::new(DriftModel::linear(lambda)?, sigma, 0.0, grid, HurstIndex::new(hurst)?)?;
                let sampler = StationarySampler::new(cfg, 20.0 / lambda)?;
                let mut acc = 0.0;
                for r in 0..replications {
                    let p = sampler.sample(SeedSpec::new(seed.wrapping_add(k), r as u64))?.path;
                    let v = &p.values()[..grid.steps()];
                    let rho = empirical_autocorrelation(v, v.len() - 1)?;
                    acc += autocorr_double_integral(&rho, t, step)?;
                }
                Ok(acc / replications as f64)
            };
            let a = mean_integral(horizon, 0)?;
            let b = mean_integral(2.0 * horizon, 1)?;
            let bound = 2f64.powf(2.0 * hurst) * 1.25;
            let pass = b / a <= bound;
            println!("verdict,T,integral_T,integral_2T,ratio,bound");
            println!("{},{horizon},{a},{b},{},{bound}", if pass { "PASS" } else { "FAIL" }, b / a);
            Ok(pass)
        }
    }
}

fn experiment(args: &ExperimentArgs) -> Result<bool> {
    let kind: ExperimentKind = args.kind.parse()?;
    let text = std::fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let cfg = ExperimentConfig::parse(&text, Some(kind))?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build()?;
    let report = pool.install(|| run_experiment(&cfg))?;
    let dir = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("fsde-{}", kind)));
    report.write_to(&dir)?;
    print!("{}", report.verdict_table());
    Ok(report.all_pass())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::SimulateFbm(a) => {
            let method: FbmMethod = a.method.parse()?;
            let path = sample_fbm(method, a.hurst, a.grid.grid()?, SeedSpec::new(a.seed, a.stream))?;
            let mut w = output(&a.out)?;
            write_path(&mut w, &path)?;
            w.flush()?;
            Ok(true)
        }
        Command::SimulateSde(a) => {
            let (_, path, coupled) = simulate(&a.sim, a.epsilon)?;
            let mut w = output(&a.out)?;
            match coupled {
                Some(cp) => write_coupled(&mut w, &cp)?,
                None => write_path(&mut w, &path)?,
            }
            w.flush()?;
            Ok(true)
        }
        Command::EstimateDrift(a) => estimate(&a).map(|_| true),
        Command::Check { check: c } => check(&c),
        Command::Experiment(a) => experiment(&a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
