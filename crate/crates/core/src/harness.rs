//! Monte Carlo experiment driver.
//!
//! An experiment is described by a flat `key = value` file (see
//! [`ExperimentConfig::parse`]). Replication `r` at horizon index `k` draws its
//! noise from `SeedSpec::new(base_seed + k, r)`, replications run on the rayon
//! pool, and results are folded in replication order, so the output does not
//! depend on the number of threads.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path as FsPath, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimators::{
    default_x_grid, density_estimate, pathwise_estimate, schedule_eval, BandwidthRule,
    BandwidthSchedule, DriftEstimator, EpsilonRule, Kernel,
};
use crate::fgn::HurstIndex;
use crate::gaussdiag::{autocorr_double_integral, empirical_autocorrelation, mehler_check, normal_density};
use crate::grid::{SeedSpec, TimeGrid};
use crate::integrals::{CorrectionSpec, RatioMode, RatioSource};
use crate::sde::{DriftModel, SdeConfig, StationarySampler};
use crate::stats;

/// Share of failed replications above which an experiment fails.
pub const FAILURE_BUDGET: f64 = 0.05;
/// Share of degenerate replications above which an evaluation point is dropped.
pub const DEGENERATE_DROP: f64 = 0.30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    DensityLimit,
    DriftRecovery,
    PathwiseCollapse,
    RateSweep,
    VarianceScaling,
    Mehler,
    Autocorr,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::DensityLimit,
        ExperimentKind::DriftRecovery,
        ExperimentKind::PathwiseCollapse,
        ExperimentKind::RateSweep,
        ExperimentKind::VarianceScaling,
        ExperimentKind::Mehler,
        ExperimentKind::Autocorr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::DensityLimit => "density_limit",
            ExperimentKind::DriftRecovery => "drift_recovery",
            ExperimentKind::PathwiseCollapse => "pathwise_collapse",
            ExperimentKind::RateSweep => "rate_sweep",
            ExperimentKind::VarianceScaling => "variance_scaling",
            ExperimentKind::Mehler => "mehler",
            ExperimentKind::Autocorr => "autocorr",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| Error::param("kind", format!("unknown experiment kind `{s}`")))
    }
}

/// Drift family of the simulated model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    Linear { lambda: f64 },
    Tanh { lambda: f64, a: f64 },
}

impl ModelSpec {
    pub fn drift(&self) -> Result<DriftModel> {
        match *self {
            ModelSpec::Linear { lambda } => DriftModel::linear(lambda),
            ModelSpec::Tanh { lambda, a } => DriftModel::tanh_dissipative(lambda, a),
        }
    }
}

/// Everything an experiment needs. Keys of the config file mirror the fields.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub model: ModelSpec,
    pub sigma: f64,
    pub hurst: HurstIndex,
    pub step: f64,
    pub horizons: Vec<f64>,
    pub schedule: BandwidthSchedule,
    #[serde(serialize_with = "kernel_name")]
    pub kernel: Kernel,
    /// Evaluation points given by the user.
    pub x: Vec<f64>,
    /// Also evaluate at the deciles of the stationary law (default: when `x` is empty).
    pub x_quantiles: bool,
    pub replications: usize,
    pub base_seed: u64,
    /// Burn-in time before `t = 0`; default `20 / M`.
    pub burn_in: Option<f64>,
    /// Kind-specific tolerance; see [`ExperimentConfig::parse`].
    pub tolerance: Option<f64>,
    pub q: Vec<usize>,
    pub rho: Vec<f64>,
    pub samples: usize,
    pub sigma0_horizon: f64,
    pub sigma0_seeds: usize,
    pub out_dir: Option<PathBuf>,
}

fn kernel_name<S: serde::Serializer>(k: &Kernel, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(k.name())
}

fn list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| Error::parse(line, format!("`{key}`: `{s}` is not a valid entry")))
        })
        .collect()
}

fn scalar<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse::<T>()
        .map_err(|_| Error::parse(line, format!("`{key}`: cannot parse `{v}`")))
}

impl ExperimentConfig {
    /// Parses the flat config format.
    ///
    /// ```text
    /// # comment
    /// kind = drift_recovery        # optional when given on the command line
    /// drift = linear               # linear | tanh
    /// lambda = 1.0
    /// a = 1.0                      # tanh only
    /// sigma = 1.0
    /// hurst = 0.7
    /// step = 0.05
    /// horizons = 250, 500, 1000
    /// bandwidth = power            # power | fixed:<h>
    /// epsilon = squared            # squared | fixed:<eps>
    /// kernel = biweight            # biweight | cosine
    /// x = -1, -0.5, 0.5, 1
    /// x_quantiles = false
    /// replications = 200
    /// seed = 42
    /// burn_in = 20
    /// tolerance = 0.1
    /// q = 1, 2, 3, 4               # mehler
    /// rho = 0.2, 0.5, 0.8          # mehler
    /// samples = 100000             # mehler
    /// sigma0_horizon = 10000
    /// sigma0_seeds = 10
    /// out = results/
    /// ```
    ///
    /// `tolerance` is the relative density error (density_limit, 0.1), the
    /// collapse fraction of `|b(x)|` (pathwise_collapse, 0.2), the largest
    /// accepted slope (rate_sweep, -0.05), the slack over `2(H - 1)`
    /// (variance_scaling, 0.25), the number of standard errors (mehler, 5) or
    /// the slack factor on `(T2/T1)^(2H)` (autocorr, 1.25).
    pub fn parse(text: &str, kind: Option<ExperimentKind>) -> Result<Self> {
        let mut seen = std::collections::BTreeMap::<String, (usize, String)>::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Error::parse(line, format!("expected `key = value`, got `{body}`")))?;
            let k = k.trim().to_string();
            if k.is_empty() {
                return Err(Error::parse(line, "empty key"));
            }
            if seen.insert(k.clone(), (line, v.trim().to_string())).is_some() {
                return Err(Error::parse(line, format!("duplicate key `{k}`")));
            }
        }
        let mut take = |key: &str| seen.remove(key);

        let file_kind = match take("kind") {
            Some((l, v)) => Some(v.parse::<ExperimentKind>().map_err(|e| Error::parse(l, e.to_string()))?),
            None => None,
        };
        let kind = match (kind, file_kind) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::param("kind", format!("command line says {a}, config says {b}")))
            }
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => return Err(Error::param("kind", "no experiment kind given")),
        };
        macro_rules! get {
            ($key:literal, $default:expr) => {
                match take($key) {
                    Some((l, v)) => scalar(l, $key, &v)?,
                    None => $default,
                }
            };
        }
        let lambda: f64 = get!("lambda", 1.0);
        let a: f64 = get!("a", 1.0);
        let model = match take("drift") {
            None => ModelSpec::Linear { lambda },
            Some((_, v)) if v == "linear" => ModelSpec::Linear { lambda },
            Some((_, v)) if v == "tanh" => ModelSpec::Tanh { lambda, a },
            Some((l, v)) => return Err(Error::parse(l, format!("unknown drift `{v}`"))),
        };
        let hurst_value: f64 = get!("hurst", 0.7);
        let hurst = HurstIndex::new(hurst_value)?;
        let rule: BandwidthRule = match take("bandwidth") {
            Some((l, v)) => v.parse().map_err(|e: Error| Error::parse(l, e.to_string()))?,
            None => BandwidthRule::PowerLaw,
        };
        let epsilon_rule: EpsilonRule = match take("epsilon") {
            Some((l, v)) => v.parse().map_err(|e: Error| Error::parse(l, e.to_string()))?,
            None => EpsilonRule::SquaredBandwidth,
        };
        let kernel: Kernel = match take("kernel") {
            Some((l, v)) => v.parse().map_err(|e: Error| Error::parse(l, e.to_string()))?,
            None => Kernel::biweight(),
        };
        let horizons: Vec<f64> = match take("horizons") {
            Some((l, v)) => list(l, "horizons", &v)?,
            None => vec![500.0],
        };
        let x: Vec<f64> = match take("x") {
            Some((l, v)) => list(l, "x", &v)?,
            None => Vec::new(),
        };
        let x_quantiles: bool = get!("x_quantiles", x.is_empty());
        let q: Vec<usize> = match take("q") {
            Some((l, v)) => list(l, "q", &v)?,
            None => vec![1, 2, 3, 4],
        };
        let rho: Vec<f64> = match take("rho") {
            Some((l, v)) => list(l, "rho", &v)?,
            None => vec![0.2, 0.5, 0.8],
        };
        let burn_in: Option<f64> = match take("burn_in") {
            Some((l, v)) => Some(scalar(l, "burn_in", &v)?),
            None => None,
        };
        let cfg = ExperimentConfig {
            kind,
            model,
            sigma: get!("sigma", 1.0),
            hurst,
            step: get!("step", 0.05),
            horizons,
            schedule: BandwidthSchedule::new(rule, epsilon_rule),
            kernel,
            x,
            x_quantiles,
            replications: get!("replications", 100),
            base_seed: get!("seed", 0),
            burn_in,
            tolerance: match take("tolerance") {
                Some((l, v)) => Some(scalar(l, "tolerance", &v)?),
                None => None,
            },
            q,
            rho,
            samples: get!("samples", 100_000),
            sigma0_horizon: get!("sigma0_horizon", 10_000.0),
            sigma0_seeds: get!("sigma0_seeds", 10),
            out_dir: take("out").map(|(_, v)| PathBuf::from(v)),
        };
        if let Some((key, (line, _))) = seen.into_iter().next() {
            return Err(Error::parse(line, format!("unknown key `{key}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let drift = self.model.drift()?;
        if !(self.sigma.is_finite() && self.sigma != 0.0) {
            return Err(Error::param("sigma", "must be finite and nonzero"));
        }
        if self.kind == ExperimentKind::Mehler {
            if self.q.is_empty() || self.rho.is_empty() || self.samples < 2 {
                return Err(Error::param("q", "mehler needs q, rho and samples >= 2"));
            }
            return Ok(());
        }
        if self.replications < 2 {
            return Err(Error::param("replications", "need at least 2"));
        }
        if self.horizons.is_empty() || self.horizons.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::param("horizons", "must be nonempty and strictly increasing"));
        }
        for &t in &self.horizons {
            TimeGrid::with_step(t, self.step)?;
            schedule_eval(&self.schedule, t, self.hurst)?;
        }
        if self.step * drift.lip_norm() >= 1.0 {
            return Err(Error::param("step", "step times Lipschitz bound must be < 1"));
        }
        if let Some(b) = self.burn_in {
            if !(b >= 10.0 / drift.dissipativity()) {
                return Err(Error::param("burn_in", "must be at least 10 / M"));
            }
        }
        if !self.x_quantiles && self.x.is_empty() && self.needs_x() {
            return Err(Error::param("x", "no evaluation points"));
        }
        match self.kind {
            ExperimentKind::RateSweep if self.horizons.len() < 3 => {
                Err(Error::param("horizons", "rate sweep needs at least 3 horizons"))
            }
            ExperimentKind::VarianceScaling if self.horizons.len() < 3 => {
                Err(Error::param("horizons", "variance scaling needs at least 3 horizons"))
            }
            ExperimentKind::VarianceScaling if !matches!(self.schedule.rule, BandwidthRule::Fixed(_)) => {
                Err(Error::param("bandwidth", "variance scaling needs a fixed bandwidth"))
            }
            ExperimentKind::PathwiseCollapse | ExperimentKind::Autocorr if self.horizons.len() < 2 => {
                Err(Error::param("horizons", "need at least 2 horizons"))
            }
            _ => Ok(()),
        }
    }

    fn needs_x(&self) -> bool {
        !matches!(self.kind, ExperimentKind::Mehler | ExperimentKind::Autocorr)
    }

    fn burn_in_time(&self, drift: &DriftModel) -> f64 {
        self.burn_in.unwrap_or(20.0 / drift.dissipativity())
    }

    /// Canonical `key = value` listing; its SHA-256 identifies the config.
    pub fn canonical(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let (drift, lambda, a) = match self.model {
            ModelSpec::Linear { lambda } => ("linear", lambda, 0.0),
            ModelSpec::Tanh { lambda, a } => ("tanh", lambda, a),
        };
        let mut s = String::new();
        let _ = writeln!(s, "kind={}", self.kind);
        let _ = writeln!(s, "drift={drift}\nlambda={lambda:?}\na={a:?}");
        let _ = writeln!(s, "sigma={:?}\nhurst={:?}\nstep={:?}", self.sigma, self.hurst.value(), self.step);
        let _ = writeln!(s, "horizons={}", join(&self.horizons));
        let _ = writeln!(s, "bandwidth={}\nepsilon={}", self.schedule.rule, self.schedule.epsilon_rule);
        let _ = writeln!(s, "kernel={}\nx={}\nx_quantiles={}", self.kernel.name(), join(&self.x), self.x_quantiles);
        let _ = writeln!(s, "replications={}\nseed={}", self.replications, self.base_seed);
        let _ = writeln!(s, "burn_in={:?}\ntolerance={:?}", self.burn_in, self.tolerance);
        let qs: Vec<f64> = self.q.iter().map(|&q| q as f64).collect();
        let _ = writeln!(s, "q={}\nrho={}\nsamples={}", join(&qs), join(&self.rho), self.samples);
        let _ = writeln!(s, "sigma0_horizon={:?}\nsigma0_seeds={}", self.sigma0_horizon, self.sigma0_seeds);
        s
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))[..16].to_string()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One row of `records.csv`. `t` and `x` are blank where they do not apply;
/// Mehler rows store the degree `q` in `t` and the correlation in `x`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Record {
    pub t: Option<f64>,
    pub x: Option<f64>,
    pub rep: usize,
    pub estimator: String,
    pub value: f64,
    pub flag: Flag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    Ok,
    Degenerate,
    Failed,
}

impl Flag {
    fn as_str(self) -> &'static str {
        match self {
            Flag::Ok => "ok",
            Flag::Degenerate => "degenerate",
            Flag::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub t: Option<f64>,
    pub x: Option<f64>,
    pub estimator: String,
    pub mean: f64,
    pub stderr: f64,
    pub variance: f64,
    pub rmse: Option<f64>,
    pub truth: Option<f64>,
    pub used: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fit {
    pub x: Option<f64>,
    pub quantity: String,
    pub slope: f64,
    pub slope_stderr: f64,
    pub excluded_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sigma0Estimate {
    pub value: f64,
    pub per_seed: Vec<f64>,
    /// Largest relative deviation of a single seed from the pooled value.
    pub spread: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub base_seed: u64,
    pub replications: usize,
    pub horizons: Vec<f64>,
    pub x_grid: Vec<f64>,
    pub sigma0: Option<Sigma0Estimate>,
    #[serde(skip)]
    pub records: Vec<Record>,
    pub aggregates: Vec<Aggregate>,
    pub fits: Vec<Fit>,
    pub verdicts: Vec<Verdict>,
    pub references: Vec<(String, String)>,
    pub notes: Vec<String>,
    pub failures: usize,
    pub wall_time_secs: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.16e}")).unwrap_or_default()
}

impl ExperimentReport {
    pub fn all_pass(&self) -> bool {
        !self.verdicts.is_empty() && self.verdicts.iter().all(|v| v.pass)
    }

    /// Long-format records `T,x,rep,estimator,value,flag`.
    pub fn records_csv(&self) -> String {
        let mut s = String::from("T,x,rep,estimator,value,flag\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.16e},{}",
                opt(r.t),
                opt(r.x),
                r.rep,
                r.estimator,
                r.value,
                r.flag.as_str()
            );
        }
        s
    }

    pub fn verdict_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment {} (config {})", self.kind, self.config_hash);
        for v in &self.verdicts {
            let _ = writeln!(s, "{:<4} {:<40} {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
        }
        for (name, value) in &self.references {
            let _ = writeln!(s, "ref  {name:<40} {value}");
        }
        for n in &self.notes {
            let _ = writeln!(s, "note {n}");
        }
        s
    }

    /// SHA-256 of the records and verdicts; independent of wall time.
    pub fn report_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.records_csv().as_bytes());
        for v in &self.verdicts {
            h.update(format!("{}|{}|{}\n", v.name, v.pass, v.detail).as_bytes());
        }
        hex(&h.finalize())
    }

    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            #[serde(flatten)]
            report: &'a ExperimentReport,
            report_hash: String,
            all_pass: bool,
        }
        Ok(serde_json::to_string_pretty(&Summary {
            report: self,
            report_hash: self.report_hash(),
            all_pass: self.all_pass(),
        })?)
    }

    /// Writes `records.csv`, `summary.json` and `verdicts.txt` into `dir`.
    pub fn write_to(&self, dir: &FsPath) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("records.csv"), self.records_csv())?;
        std::fs::write(dir.join("summary.json"), self.summary_json()?)?;
        std::fs::write(dir.join("verdicts.txt"), self.verdict_table())?;
        Ok(())
    }
}

/// Standard deviation of the stationary law from long burn-in paths, one per seed.
pub fn sigma0_oracle(cfg: &ExperimentConfig) -> Result<(Sigma0Estimate, Vec<f64>)> {
    let drift = cfg.model.drift()?;
    let grid = TimeGrid::with_step(cfg.sigma0_horizon, cfg.step)?;
    let sde = SdeConfig::new(drift.clone(), cfg.sigma, 0.0, grid, cfg.hurst)?;
    let sampler = StationarySampler::new(sde, cfg.burn_in_time(&drift))?;
    let seeds = cfg.sigma0_seeds.max(2);
    let paths: Vec<Vec<f64>> = (0..seeds)
        .into_par_iter()
        .map(|s| {
            let seed = SeedSpec::new(cfg.base_seed ^ 0x5349_474d_4130, s as u64);
            sampler.sample(seed).map(|p| p.path.into_values())
        })
        .collect::<Result<_>>()?;
    let vars: Vec<f64> = paths.iter().map(|p| stats::variance(p)).collect();
    let value = stats::mean(&vars).sqrt();
    let per_seed: Vec<f64> = vars.iter().map(|v| v.sqrt()).collect();
    let spread = per_seed.iter().map(|s| (s / value - 1.0).abs()).fold(0.0, f64::max);
    let pooled: Vec<f64> = paths.into_iter().flatten().collect();
    Ok((
        Sigma0Estimate {
            value,
            per_seed,
            spread,
        },
        pooled,
    ))
}

/// Per-replication output: `(x, estimator, value, flag)`.
type RepRows = Vec<(Option<f64>, &'static str, f64, Flag)>;

struct Horizon {
    t: f64,
    h: f64,
    eps: f64,
    sampler: StationarySampler,
    seed_base: u64,
}

fn horizon_setup(cfg: &ExperimentConfig, drift: &DriftModel, k: usize, t: f64) -> Result<Horizon> {
    let grid = TimeGrid::with_step(t, cfg.step)?;
    let sde = SdeConfig::new(drift.clone(), cfg.sigma, 0.0, grid, cfg.hurst)?;
    let (h, eps) = schedule_eval(&cfg.schedule, t, cfg.hurst)?;
    Ok(Horizon {
        t,
        h,
        eps,
        sampler: StationarySampler::new(sde, cfg.burn_in_time(drift))?,
        seed_base: cfg.base_seed.wrapping_add(k as u64),
    })
}

fn replicate(
    cfg: &ExperimentConfig,
    hz: &Horizon,
    xs: &[f64],
    f: impl Fn(&Horizon, &[f64], SeedSpec) -> Result<RepRows> + Sync,
) -> Vec<Result<RepRows>> {
    (0..cfg.replications)
        .into_par_iter()
        .map(|r| f(hz, xs, SeedSpec::new(hz.seed_base, r as u64)))
        .collect()
}

fn rep_density(cfg: &ExperimentConfig) -> impl Fn(&Horizon, &[f64], SeedSpec) -> Result<RepRows> + Sync + '_ {
    move |hz, xs, seed| {
        let s = hz.sampler.sample(seed)?;
        xs.iter()
            .map(|&x| Ok((Some(x), "f_hat", density_estimate(&s.path, x, hz.h, &cfg.kernel)?, Flag::Ok)))
            .collect()
    }
}

fn rep_drift(cfg: &ExperimentConfig) -> impl Fn(&Horizon, &[f64], SeedSpec) -> Result<RepRows> + Sync + '_ {
    move |hz, xs, seed| {
        let s = hz.sampler.sample(seed)?;
        let cp = s.coupled(hz.sampler.config(), hz.eps)?;
        let spec = CorrectionSpec::new(cfg.hurst, cfg.sigma, RatioMode::Coupled);
        let est = DriftEstimator::new(RatioSource::Coupled(&cp), spec)?;
        let mut rows = Vec::with_capacity(3 * xs.len());
        for &x in xs {
            let e = est.estimate(x, hz.h, &cfg.kernel)?;
            let flag = if e.degenerate { Flag::Degenerate } else { Flag::Ok };
            rows.push((Some(x), "f_hat", e.f_hat, Flag::Ok));
            rows.push((Some(x), "b_tilde", e.pathwise, flag));
            rows.push((Some(x), "b_hat_eps", e.estimate, flag));
        }
        Ok(rows)
    }
}

fn rep_pathwise(cfg: &ExperimentConfig) -> impl Fn(&Horizon, &[f64], SeedSpec) -> Result<RepRows> + Sync + '_ {
    move |hz, xs, seed| {
        let s = hz.sampler.sample(seed)?;
        let mut rows = Vec::with_capacity(2 * xs.len());
        for &x in xs {
            let p = pathwise_estimate(&s.path, x, hz.h, &cfg.kernel)?;
            let flag = if p.degenerate { Flag::Degenerate } else { Flag::Ok };
            rows.push((Some(x), "b_tilde", p.closed_form, flag));
            rows.push((Some(x), "b_tilde_riemann", p.riemann, flag));
        }
        Ok(rows)
    }
}

fn rep_stochastic(cfg: &ExperimentConfig) -> impl Fn(&Horizon, &[f64], SeedSpec) -> Result<RepRows> + Sync + '_ {
    move |hz, xs, seed| {
        let s = hz.sampler.sample(seed)?;
        let drift = &hz.sampler.config().drift;
        let spec = CorrectionSpec::new(cfg.hurst, cfg.sigma, RatioMode::Derivative);
        let est = DriftEstimator::new(RatioSource::Model { drift, path: &s.path }, spec)?;
        xs.iter()
            .map(|&x| {
                let d = est.decomposition(x, hz.h, &cfg.kernel, drift)?;
                Ok((Some(x), "stochastic_term", d.stochastic, Flag::Ok))
            })
            .collect()
    }
}

fn rep_autocorr(_cfg: &ExperimentConfig) -> impl Fn(&Horizon, &[f64], SeedSpec) -> Result<RepRows> + Sync {
    move |hz, _xs, seed| {
        let s = hz.sampler.sample(seed)?;
        let v = s.path.values();
        let n = v.len() - 1;
        let rho = empirical_autocorrelation(&v[..n], n - 1)?;
        let dt = s.path.grid().step();
        Ok(vec![(None, "autocorr_double_integral", autocorr_double_integral(&rho, hz.t, dt)?, Flag::Ok)])
    }
}

/// Collected output of all horizons before the kind-specific verdicts.
struct Collected {
    records: Vec<Record>,
    failures: Vec<usize>,
    notes: Vec<String>,
}

fn collect(cfg: &ExperimentConfig, horizons: &[Horizon], results: Vec<Vec<Result<RepRows>>>) -> Collected {
    let mut c = Collected {
        records: Vec::new(),
        failures: Vec::new(),
        notes: Vec::new(),
    };
    for (hz, reps) in horizons.iter().zip(results) {
        let mut failed = 0;
        for (rep, out) in reps.into_iter().enumerate() {
            match out {
                Ok(rows) => c.records.extend(rows.into_iter().map(|(x, est, value, flag)| Record {
                    t: Some(hz.t),
                    x,
                    rep,
                    estimator: est.to_string(),
                    value,
                    flag,
                })),
                Err(e) => {
                    failed += 1;
                    c.notes.push(format!("T={} replication {rep} failed: {e}", hz.t));
                    c.records.push(Record {
                        t: Some(hz.t),
                        x: None,
                        rep,
                        estimator: "replication".into(),
                        value: f64::NAN,
                        flag: Flag::Failed,
                    });
                }
            }
        }
        c.failures.push(failed);
    }
    let _ = cfg;
    c
}

fn aggregate(records: &[Record], t: f64, x: Option<f64>, estimator: &str, truth: Option<f64>) -> Aggregate {
    let mut vals = Vec::new();
    let mut excluded = 0;
    for r in records {
        if r.t == Some(t) && r.x == x && r.estimator == estimator {
            if r.flag == Flag::Ok && r.value.is_finite() {
                vals.push(r.value);
            } else {
                excluded += 1;
            }
        }
    }
    let n = vals.len();
    let (mean, variance, stderr) = if n >= 2 {
        (stats::mean(&vals), stats::variance(&vals), stats::std_error(&vals))
    } else {
        (vals.first().copied().unwrap_or(f64::NAN), f64::NAN, f64::NAN)
    };
    let rmse = truth.map(|b| (vals.iter().map(|v| (v - b).powi(2)).sum::<f64>() / n as f64).sqrt());
    Aggregate {
        t: Some(t),
        x,
        estimator: estimator.to_string(),
        mean,
        stderr,
        variance,
        rmse,
        truth,
        used: n,
        excluded,
    }
}

fn abs_aggregate(records: &[Record], t: f64, x: f64, estimator: &str) -> Aggregate {
    let abs: Vec<Record> = records
        .iter()
        .filter(|r| r.t == Some(t) && r.x == Some(x) && r.estimator == estimator)
        .map(|r| Record {
            value: r.value.abs(),
            ..r.clone()
        })
        .collect();
    let mut a = aggregate(&abs, t, Some(x), estimator, None);
    a.estimator = format!("abs_{estimator}");
    a
}

fn budget_verdict(cfg: &ExperimentConfig, failures: &[usize]) -> Verdict {
    let worst = failures.iter().copied().max().unwrap_or(0);
    let share = worst as f64 / cfg.replications as f64;
    Verdict {
        name: "failure_budget".into(),
        pass: share <= FAILURE_BUDGET,
        detail: format!("worst horizon lost {worst}/{} replications", cfg.replications),
    }
}

/// Evaluation points whose degenerate share stays below the drop level at every horizon.
fn kept_points(cfg: &ExperimentConfig, records: &[Record], xs: &[f64], estimator: &str, notes: &mut Vec<String>) -> Vec<f64> {
    xs.iter()
        .copied()
        .filter(|&x| {
            let bad = cfg.horizons.iter().find(|&&t| {
                let degenerate = records
                    .iter()
                    .filter(|r| r.t == Some(t) && r.x == Some(x) && r.estimator == estimator)
                    .filter(|r| r.flag == Flag::Degenerate)
                    .count();
                degenerate as f64 > DEGENERATE_DROP * cfg.replications as f64
            });
            if let Some(t) = bad {
                notes.push(format!("x={x} dropped: more than 30% degenerate replications at T={t}"));
            }
            bad.is_none()
        })
        .collect()
}

fn reference_lines(cfg: &ExperimentConfig) -> Vec<(String, String)> {
    let h = cfg.hurst.value();
    vec![
        ("bias_order".into(), "h(T)".into()),
        ("variance_order".into(), format!("T^{:.4} h^-2", h - 1.0)),
        ("best_rate_exponent".into(), format!("{:.4}", -2.0 / 3.0 * (1.0 - h))),
        ("schedule".into(), format!("h(T) = T^{:.4}", (h - 1.0) / 3.0)),
    ]
}

/// Runs one experiment on the current rayon pool.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut report = ExperimentReport {
        kind: cfg.kind,
        config_hash: cfg.hash(),
        base_seed: cfg.base_seed,
        replications: cfg.replications,
        horizons: cfg.horizons.clone(),
        x_grid: Vec::new(),
        sigma0: None,
        records: Vec::new(),
        aggregates: Vec::new(),
        fits: Vec::new(),
        verdicts: Vec::new(),
        references: Vec::new(),
        notes: Vec::new(),
        failures: 0,
        wall_time_secs: 0.0,
    };
    if cfg.kind == ExperimentKind::Mehler {
        run_mehler(cfg, &mut report)?;
        report.wall_time_secs = start.elapsed().as_secs_f64();
        return Ok(report);
    }
    let drift = cfg.model.drift()?;
    let needs_sigma0 = cfg.kind == ExperimentKind::DensityLimit || (cfg.needs_x() && cfg.x_quantiles);
    let mut xs = cfg.x.clone();
    if needs_sigma0 {
        let (s0, pooled) = sigma0_oracle(cfg)?;
        if cfg.x_quantiles {
            xs = default_x_grid(&pooled, &cfg.x);
        }
        report.notes.push(format!(
            "sigma0 = {:.6} from {} paths of length {} (largest per-seed deviation {:.2}%)",
            s0.value,
            s0.per_seed.len(),
            cfg.sigma0_horizon,
            100.0 * s0.spread
        ));
        report.sigma0 = Some(s0);
    }
    if !cfg.needs_x() {
        xs.clear();
    }
    report.x_grid = xs.clone();

    let horizons: Vec<Horizon> = cfg
        .horizons
        .iter()
        .enumerate()
        .map(|(k, &t)| horizon_setup(cfg, &drift, k, t))
        .collect::<Result<_>>()?;
    let results: Vec<Vec<Result<RepRows>>> = horizons
        .iter()
        .map(|hz| match cfg.kind {
            ExperimentKind::DensityLimit => replicate(cfg, hz, &xs, rep_density(cfg)),
            ExperimentKind::DriftRecovery | ExperimentKind::RateSweep => replicate(cfg, hz, &xs, rep_drift(cfg)),
            ExperimentKind::PathwiseCollapse => replicate(cfg, hz, &xs, rep_pathwise(cfg)),
            ExperimentKind::VarianceScaling => replicate(cfg, hz, &xs, rep_stochastic(cfg)),
            ExperimentKind::Autocorr => replicate(cfg, hz, &xs, rep_autocorr(cfg)),
            ExperimentKind::Mehler => unreachable!("handled above"),
        })
        .collect();
    let c = collect(cfg, &horizons, results);
    report.records = c.records;
    report.notes.extend(c.notes);
    report.failures = c.failures.iter().sum();
    report.verdicts.push(budget_verdict(cfg, &c.failures));

    let recs = &report.records;
    let mut aggs = Vec::new();
    let mut fits = Vec::new();
    let mut verdicts = Vec::new();
    let mut notes = Vec::new();
    match cfg.kind {
        ExperimentKind::DensityLimit => {
            let tol = cfg.tolerance.unwrap_or(0.10);
            let s0 = report.sigma0.as_ref().expect("computed above").value;
            for hz in &horizons {
                for &x in &xs {
                    let target = normal_density(x / s0) / s0;
                    let a = aggregate(recs, hz.t, Some(x), "f_hat", Some(target));
                    let rel = (a.mean - target).abs() / target;
                    verdicts.push(Verdict {
                        name: format!("density T={} x={x}", hz.t),
                        pass: rel <= tol,
                        detail: format!("mean {:.5} target {:.5} rel.err {:.4} (tol {tol})", a.mean, target, rel),
                    });
                    aggs.push(a);
                }
            }
        }
        ExperimentKind::DriftRecovery => {
            let kept = kept_points(cfg, recs, &xs, "b_hat_eps", &mut notes);
            for hz in &horizons {
                for &x in &xs {
                    aggs.push(aggregate(recs, hz.t, Some(x), "f_hat", None));
                    aggs.push(aggregate(recs, hz.t, Some(x), "b_tilde", Some(drift.value(x))));
                    let a = aggregate(recs, hz.t, Some(x), "b_hat_eps", Some(drift.value(x)));
                    if kept.contains(&x) {
                        let err = (a.mean - drift.value(x)).abs();
                        let bound = drift.lip_norm() * hz.h + 3.0 * a.stderr;
                        verdicts.push(Verdict {
                            name: format!("recovery T={} x={x}", hz.t),
                            pass: err <= bound,
                            detail: format!("|mean - b(x)| = {err:.4} <= {bound:.4} (h = {:.4})", hz.h),
                        });
                    }
                    aggs.push(a);
                }
            }
        }
        ExperimentKind::PathwiseCollapse => {
            let frac = cfg.tolerance.unwrap_or(0.2);
            let kept = kept_points(cfg, recs, &xs, "b_tilde", &mut notes);
            for &x in &xs {
                let means: Vec<f64> = horizons
                    .iter()
                    .map(|hz| {
                        let a = abs_aggregate(recs, hz.t, x, "b_tilde");
                        let m = a.mean;
                        aggs.push(a);
                        aggs.push(aggregate(recs, hz.t, Some(x), "b_tilde_riemann", None));
                        m
                    })
                    .collect();
                if !kept.contains(&x) {
                    continue;
                }
                verdicts.push(Verdict {
                    name: format!("collapse decreasing x={x}"),
                    pass: means.windows(2).all(|w| w[1] < w[0]),
                    detail: format!("mean |b_tilde| by T: {}", fmt_list(&means)),
                });
                let last = *means.last().expect("at least 2 horizons");
                let target = frac * drift.value(x).abs();
                verdicts.push(Verdict {
                    name: format!("collapse level x={x}"),
                    pass: last < target,
                    detail: format!("{last:.5} < {frac} |b(x)| = {target:.5}"),
                });
            }
        }
        ExperimentKind::RateSweep => {
            let max_slope = cfg.tolerance.unwrap_or(-0.05);
            let kept = kept_points(cfg, recs, &xs, "b_hat_eps", &mut notes);
            for &x in &xs {
                let mut pts = Vec::new();
                for hz in &horizons {
                    let a = aggregate(recs, hz.t, Some(x), "b_hat_eps", Some(drift.value(x)));
                    pts.push((hz.t, a.rmse.unwrap_or(f64::NAN)));
                    aggs.push(a);
                }
                if !kept.contains(&x) {
                    continue;
                }
                let rmse: Vec<f64> = pts.iter().map(|p| p.1).collect();
                verdicts.push(Verdict {
                    name: format!("rmse nonincreasing x={x}"),
                    pass: rmse.windows(2).all(|w| w[1] <= w[0]),
                    detail: format!("rmse by T: {}", fmt_list(&rmse)),
                });
                match stats::fit_rate(&pts) {
                    Ok(fit) => {
                        verdicts.push(Verdict {
                            name: format!("rmse slope x={x}"),
                            pass: fit.slope <= max_slope,
                            detail: format!(
                                "slope {:.4} +- {:.4} <= {max_slope} (best-rate reference {:.4})",
                                fit.slope,
                                fit.slope_stderr,
                                -2.0 / 3.0 * (1.0 - cfg.hurst.value())
                            ),
                        });
                        fits.push(Fit {
                            x: Some(x),
                            quantity: "rmse_b_hat_eps".into(),
                            slope: fit.slope,
                            slope_stderr: fit.slope_stderr,
                            excluded_points: fit.excluded,
                        });
                    }
                    Err(e) => verdicts.push(Verdict {
                        name: format!("rmse slope x={x}"),
                        pass: false,
                        detail: e.to_string(),
                    }),
                }
            }
            report.references = reference_lines(cfg);
        }
        ExperimentKind::VarianceScaling => {
            let slack = cfg.tolerance.unwrap_or(0.25);
            let limit = 2.0 * (cfg.hurst.value() - 1.0) + slack;
            for &x in &xs {
                let mut pts = Vec::new();
                for hz in &horizons {
                    let a = aggregate(recs, hz.t, Some(x), "stochastic_term", None);
                    pts.push((hz.t, a.variance));
                    aggs.push(a);
                }
                match stats::fit_rate(&pts) {
                    Ok(fit) => {
                        verdicts.push(Verdict {
                            name: format!("variance slope x={x}"),
                            pass: fit.slope <= limit,
                            detail: format!("slope {:.4} +- {:.4} <= {limit:.4}", fit.slope, fit.slope_stderr),
                        });
                        fits.push(Fit {
                            x: Some(x),
                            quantity: "var_stochastic_term".into(),
                            slope: fit.slope,
                            slope_stderr: fit.slope_stderr,
                            excluded_points: fit.excluded,
                        });
                    }
                    Err(e) => verdicts.push(Verdict {
                        name: format!("variance slope x={x}"),
                        pass: false,
                        detail: e.to_string(),
                    }),
                }
            }
            report.references = vec![("variance_exponent".into(), format!("{:.4}", 2.0 * (cfg.hurst.value() - 1.0)))];
        }
        ExperimentKind::Autocorr => {
            let factor = cfg.tolerance.unwrap_or(1.25);
            let two_h = 2.0 * cfg.hurst.value();
            let means: Vec<f64> = horizons
                .iter()
                .map(|hz| {
                    let a = aggregate(recs, hz.t, None, "autocorr_double_integral", None);
                    let m = a.mean;
                    aggs.push(a);
                    m
                })
                .collect();
            for (w, hw) in means.windows(2).zip(horizons.windows(2)) {
                let ratio = w[1] / w[0];
                let bound = (hw[1].t / hw[0].t).powf(two_h) * factor;
                verdicts.push(Verdict {
                    name: format!("autocorr growth T={}->{}", hw[0].t, hw[1].t),
                    pass: ratio <= bound,
                    detail: format!("ratio {ratio:.4} <= {bound:.4}"),
                });
            }
        }
        ExperimentKind::Mehler => unreachable!("handled above"),
    }
    report.aggregates = aggs;
    report.fits = fits;
    report.verdicts.extend(verdicts);
    report.notes.extend(notes);
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.5}")).collect::<Vec<_>>().join(", ")
}

fn run_mehler(cfg: &ExperimentConfig, report: &mut ExperimentReport) -> Result<()> {
    let k = cfg.tolerance.unwrap_or(5.0);
    let cells: Vec<(usize, f64)> = cfg
        .q
        .iter()
        .flat_map(|&q| cfg.rho.iter().map(move |&r| (q, r)))
        .collect();
    let checks: Vec<_> = cells
        .par_iter()
        .enumerate()
        .map(|(i, &(q, rho))| mehler_check(q, rho, cfg.samples, SeedSpec::new(cfg.base_seed, i as u64)))
        .collect::<Result<_>>()?;
    for (&(q, rho), c) in cells.iter().zip(&checks) {
        report.records.push(Record {
            t: Some(q as f64),
            x: Some(rho),
            rep: 0,
            estimator: "mehler_empirical".into(),
            value: c.empirical,
            flag: Flag::Ok,
        });
        report.aggregates.push(Aggregate {
            t: Some(q as f64),
            x: Some(rho),
            estimator: format!("mehler_q{q}"),
            mean: c.empirical,
            stderr: c.stderr,
            variance: c.stderr * c.stderr * cfg.samples as f64,
            rmse: None,
            truth: Some(c.predicted),
            used: cfg.samples,
            excluded: 0,
        });
        report.verdicts.push(Verdict {
            name: format!("mehler q={q} rho={rho}"),
            pass: c.within(k),
            detail: format!(
                "empirical {:.5} predicted {:.5} ({:.2} se)",
                c.empirical,
                c.predicted,
                (c.empirical - c.predicted).abs() / c.stderr
            ),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "drift = linear\nlambda = 1\nsigma = 1\nhurst = 0.7\nstep = 0.05\n";

    #[test]
    fn parse_full_config() {
        let text = format!(
            "{BASE}# sweep\nhorizons = 250, 500, 1000\nbandwidth = power\nepsilon = squared\nkernel = cosine\nx = 0.5 , -0.5\nreplications = 10\nseed = 9\nout = res # trailing\n"
        );
        let cfg = ExperimentConfig::parse(&text, Some(ExperimentKind::RateSweep)).unwrap();
        assert_eq!(cfg.horizons, vec![250.0, 500.0, 1000.0]);
        assert_eq!(cfg.x, vec![0.5, -0.5]);
        assert!(!cfg.x_quantiles);
        assert_eq!(cfg.kernel.name(), "cosine");
        assert_eq!(cfg.out_dir, Some(PathBuf::from("res")));
        assert_eq!(cfg.hash().len(), 16);
        let again = ExperimentConfig::parse(&text, Some(ExperimentKind::RateSweep)).unwrap();
        assert_eq!(cfg.hash(), again.hash());
    }

    #[test]
    fn config_errors() {
        let bad = [
            format!("{BASE}horizons = 500, 250\n"),
            format!("{BASE}replications = 1\nhorizons = 500\n"),
            format!("{BASE}colour = red\n"),
            format!("{BASE}sigma = 2\n"),
            format!("{BASE}horizons = 0.5\n"),
            format!("{BASE}horizons = 10.01\n"),
            format!("{BASE}hurst = 0.5\n"),
            format!("{BASE}just words\n"),
            format!("{BASE}kind = mehler\n"),
        ];
        for t in &bad {
            assert!(ExperimentConfig::parse(t, Some(ExperimentKind::DriftRecovery)).is_err(), "{t}");
        }
        assert!(ExperimentConfig::parse(BASE, None).is_err());
        let vs = format!("{BASE}horizons = 125, 250, 500\nbandwidth = power\n");
        assert!(ExperimentConfig::parse(&vs, Some(ExperimentKind::VarianceScaling)).is_err());
    }

    #[test]
    fn small_drift_recovery_is_reproducible() {
        let text = format!("{BASE}horizons = 20, 40\nx = 0.3\nreplications = 6\nseed = 3\n");
        let cfg = ExperimentConfig::parse(&text, Some(ExperimentKind::DriftRecovery)).unwrap();
        let a = run_experiment(&cfg).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| run_experiment(&cfg).unwrap());
        assert_eq!(a.records_csv(), b.records_csv());
        assert_eq!(a.report_hash(), b.report_hash());
        assert_eq!(a.records.len(), 2 * 6 * 3);
        assert!(a.records_csv().starts_with("T,x,rep,estimator,value,flag\n"));
        assert!(a.verdicts.iter().any(|v| v.name == "failure_budget" && v.pass));
    }
}
