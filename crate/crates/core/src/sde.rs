//! Additive-noise SDEs `dX = b(X) dt + sigma dB` driven by fractional noise.
//!
//! The drift is a [`DriftModel`]: a dissipative map (`b' <= -M < 0`) with
//! bounded derivatives, validated numerically on a probe grid when it is
//! built. Paths are produced by the Euler scheme, which is exact in the
//! noise term because the noise is additive.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fgn::{FgnFft, HurstIndex};
use crate::grid::{Path, SeedSpec, TimeGrid};

/// A drift function with its first two derivatives.
pub trait Drift: Send + Sync + fmt::Debug {
    fn value(&self, x: f64) -> f64;
    fn deriv(&self, x: f64) -> f64;
    fn second_deriv(&self, x: f64) -> f64;

    /// `(b(x + gap) - b(x)) / gap`, continuous as `gap -> 0`.
    ///
    /// Override when a cancellation-free form exists.
    fn secant_slope(&self, x: f64, gap: f64) -> f64 {
        if gap.abs() <= 1e-7 * (1.0 + x.abs()) {
            self.deriv(x + 0.5 * gap)
        } else {
            (self.value(x + gap) - self.value(x)) / gap
        }
    }
}

/// `b(x) = -lambda x`.
#[derive(Debug, Clone, Copy)]
pub struct LinearDrift {
    pub lambda: f64,
}

impl Drift for LinearDrift {
    fn value(&self, x: f64) -> f64 {
        -self.lambda * x
    }
    fn deriv(&self, _x: f64) -> f64 {
        -self.lambda
    }
    fn second_deriv(&self, _x: f64) -> f64 {
        0.0
    }
    fn secant_slope(&self, _x: f64, _gap: f64) -> f64 {
        -self.lambda
    }
}

/// `b(x) = -lambda x - a tanh(x)`.
#[derive(Debug, Clone, Copy)]
pub struct TanhDrift {
    pub lambda: f64,
    pub a: f64,
}

fn sech2(x: f64) -> f64 {
    let c = x.cosh();
    1.0 / (c * c)
}

impl Drift for TanhDrift {
    fn value(&self, x: f64) -> f64 {
        -self.lambda * x - self.a * x.tanh()
    }
    fn deriv(&self, x: f64) -> f64 {
        -self.lambda - self.a * sech2(x)
    }
    fn second_deriv(&self, x: f64) -> f64 {
        2.0 * self.a * sech2(x) * x.tanh()
    }
    fn secant_slope(&self, x: f64, gap: f64) -> f64 {
        // tanh(y) - tanh(x) = sinh(y - x) / (cosh x cosh y)
        let sinhc = if gap.abs() < 1e-4 {
            1.0 + gap * gap / 6.0
        } else {
            gap.sinh() / gap
        };
        -self.lambda - self.a * sinhc / (x.cosh() * (x + gap).cosh())
    }
}

/// Range and resolution of the numerical checks run when a drift is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRange {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for ProbeRange {
    fn default() -> Self {
        Self {
            lo: -50.0,
            hi: 50.0,
            points: 10_000,
        }
    }
}

/// Catalog identity, kept so modes that need a closed form can check it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum DriftKind {
    Linear { lambda: f64 },
    Tanh { lambda: f64, a: f64 },
    Custom,
}

/// A validated dissipative drift.
#[derive(Clone)]
pub struct DriftModel {
    name: String,
    kind: DriftKind,
    drift: Arc<dyn Drift>,
    dissipativity: f64,
    lip_norm: f64,
    second_deriv_sup: f64,
}

impl fmt::Debug for DriftModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriftModel")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("dissipativity", &self.dissipativity)
            .field("lip_norm", &self.lip_norm)
            .field("second_deriv_sup", &self.second_deriv_sup)
            .finish()
    }
}

impl DriftModel {
    pub fn linear(lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::param("lambda", format!("must be finite and > 0, got {lambda}")));
        }
        Self::validated(
            format!("linear({lambda})"),
            DriftKind::Linear { lambda },
            Arc::new(LinearDrift { lambda }),
            lambda,
            lambda,
            ProbeRange::default(),
        )
    }

    pub fn tanh_dissipative(lambda: f64, a: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::param("lambda", format!("must be finite and > 0, got {lambda}")));
        }
        if !(a.is_finite() && a >= 0.0) {
            return Err(Error::param("a", format!("must be finite and >= 0, got {a}")));
        }
        Self::validated(
            format!("tanh({lambda},{a})"),
            DriftKind::Tanh { lambda, a },
            Arc::new(TanhDrift { lambda, a }),
            lambda,
            lambda + a,
            ProbeRange::default(),
        )
    }

    /// A user-supplied drift; `dissipativity` is `M` and `lip_norm` the Lipschitz bound.
    pub fn custom(
        name: impl Into<String>,
        drift: Arc<dyn Drift>,
        dissipativity: f64,
        lip_norm: f64,
        probe: ProbeRange,
    ) -> Result<Self> {
        Self::validated(name.into(), DriftKind::Custom, drift, dissipativity, lip_norm, probe)
    }

    fn validated(
        name: String,
        kind: DriftKind,
        drift: Arc<dyn Drift>,
        dissipativity: f64,
        lip_norm: f64,
        probe: ProbeRange,
    ) -> Result<Self> {
        let fail = |reason: String| Error::InvalidDrift {
            model: name.clone(),
            reason,
        };
        if !(dissipativity > 0.0 && lip_norm >= dissipativity && lip_norm.is_finite()) {
            return Err(fail(format!(
                "need 0 < M <= lip_norm < inf, got M={dissipativity}, lip_norm={lip_norm}"
            )));
        }
        if !(probe.points >= 2 && probe.lo < probe.hi) {
            return Err(fail("empty probe range".into()));
        }
        let spacing = (probe.hi - probe.lo) / (probe.points - 1) as f64;
        let fd_step = 1e-5;
        let mut second_sup: f64 = 0.0;
        let mut prev: Option<(f64, f64)> = None;
        for i in 0..probe.points {
            let x = probe.lo + i as f64 * spacing;
            let (b, b1, b2) = (drift.value(x), drift.deriv(x), drift.second_deriv(x));
            if !(b.is_finite() && b1.is_finite() && b2.is_finite()) {
                return Err(fail(format!("non-finite value at x={x}")));
            }
            if b1 > -dissipativity * (1.0 - 1e-12) {
                return Err(fail(format!("b'({x}) = {b1} exceeds -M = {}", -dissipativity)));
            }
            let fd1 = (drift.value(x + fd_step) - drift.value(x - fd_step)) / (2.0 * fd_step);
            if (fd1 - b1).abs() > 1e-6 * b1.abs().max(1.0) {
                return Err(fail(format!("b' disagrees with finite difference at x={x}")));
            }
            let fd2 = (drift.deriv(x + fd_step) - drift.deriv(x - fd_step)) / (2.0 * fd_step);
            if (fd2 - b2).abs() > 1e-6 * b2.abs().max(1.0) {
                return Err(fail(format!("b'' disagrees with finite difference at x={x}")));
            }
            if let Some((px, pb)) = prev {
                if (b - pb).abs() > lip_norm * (x - px) * (1.0 + 1e-9) {
                    return Err(fail(format!("Lipschitz bound {lip_norm} violated near x={x}")));
                }
            }
            second_sup = second_sup.max(b2.abs());
            prev = Some((x, b));
        }
        Ok(Self {
            name,
            kind,
            drift,
            dissipativity,
            lip_norm,
            second_deriv_sup: second_sup,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> DriftKind {
        self.kind
    }

    pub fn value(&self, x: f64) -> f64 {
        self.drift.value(x)
    }

    pub fn deriv(&self, x: f64) -> f64 {
        self.drift.deriv(x)
    }

    pub fn second_deriv(&self, x: f64) -> f64 {
        self.drift.second_deriv(x)
    }

    pub fn secant_slope(&self, x: f64, gap: f64) -> f64 {
        self.drift.secant_slope(x, gap)
    }

    /// `M` with `b' <= -M`.
    pub fn dissipativity(&self) -> f64 {
        self.dissipativity
    }

    pub fn lip_norm(&self) -> f64 {
        self.lip_norm
    }

    /// `sup |b''|` measured on the probe grid.
    pub fn second_deriv_sup(&self) -> f64 {
        self.second_deriv_sup
    }

    /// Slope of the linear catalog model, if this is one.
    pub fn linear_rate(&self) -> Option<f64> {
        match self.kind {
            DriftKind::Linear { lambda } => Some(lambda),
            _ => None,
        }
    }
}

/// Everything needed to integrate one path.
#[derive(Debug, Clone)]
pub struct SdeConfig {
    pub drift: DriftModel,
    pub sigma: f64,
    pub x0: f64,
    pub grid: TimeGrid,
    pub hurst: HurstIndex,
}

impl SdeConfig {
    pub fn new(drift: DriftModel, sigma: f64, x0: f64, grid: TimeGrid, hurst: HurstIndex) -> Result<Self> {
        if !(sigma.is_finite() && sigma != 0.0) {
            return Err(Error::param("sigma", format!("must be finite and nonzero, got {sigma}")));
        }
        if !x0.is_finite() {
            return Err(Error::param("x0", "must be finite"));
        }
        // 1 + step * b' must stay positive or the Euler flow stops being monotone.
        if grid.step() * drift.lip_norm() >= 1.0 {
            return Err(Error::param(
                "step",
                format!(
                    "step {} times Lipschitz bound {} must be < 1",
                    grid.step(),
                    drift.lip_norm()
                ),
            ));
        }
        Ok(Self {
            drift,
            sigma,
            x0,
            grid,
            hurst,
        })
    }

    pub fn with_x0(&self, x0: f64) -> Self {
        Self { x0, ..self.clone() }
    }

    /// Slack on the continuous-time contraction bound: `10 * step * lip_norm`.
    pub fn contraction_slack(&self) -> f64 {
        10.0 * self.grid.step() * self.drift.lip_norm()
    }
}

/// Euler scheme `X_{i+1} = X_i + b(X_i) step + sigma (B_{i+1} - B_i)`.
pub fn solve_euler(cfg: &SdeConfig, noise: &Path) -> Result<Path> {
    if *noise.grid() != cfg.grid {
        return Err(Error::GridMismatch("noise path grid differs from the SDE grid".into()));
    }
    let dt = cfg.grid.step();
    let mut values = Vec::with_capacity(cfg.grid.steps() + 1);
    let mut x = cfg.x0;
    values.push(x);
    for (i, db) in noise.increments().enumerate() {
        x = x + cfg.drift.value(x) * dt + cfg.sigma * db;
        if !x.is_finite() {
            return Err(Error::NonFinite { step: i + 1 });
        }
        values.push(x);
    }
    Path::new(cfg.grid, values)
}

/// Two solutions driven by one noise path, started `epsilon` apart.
///
/// Besides both paths, the per-step growth factors `g_i` of the gap
/// `d_i = X_{x0+eps}(t_i) - X_{x0}(t_i)` are kept, `d_{i+1} = g_i d_i`.
/// The gap itself shrinks like `exp(-M t)` and falls below the resolution of
/// the path values after a few dozen time units; ratios of gaps are taken
/// from the growth factors instead.
#[derive(Debug, Clone)]
pub struct CoupledPaths {
    pub base: Path,
    pub shifted: Path,
    pub epsilon: f64,
    pub noise_seed: Option<SeedSpec>,
    growth: Vec<f64>,
}

impl CoupledPaths {
    /// Builds the coupling from two observed paths by differencing them.
    pub fn from_observed(base: Path, shifted: Path, epsilon: f64) -> Result<Self> {
        base.ensure_same_grid(&shifted)?;
        if !(epsilon > 0.0) {
            return Err(Error::param("epsilon", format!("must be > 0, got {epsilon}")));
        }
        let gaps: Vec<f64> = base
            .values()
            .iter()
            .zip(shifted.values())
            .map(|(b, s)| s - b)
            .collect();
        if let Some(step) = gaps.iter().position(|&d| !(d > 0.0)) {
            return Err(Error::BrokenCoupling {
                step,
                reason: format!(
                    "shifted - base = {} is not positive (gaps below rounding need the log_gap column)",
                    gaps[step]
                ),
            });
        }
        let growth = gaps.windows(2).map(|w| w[1] / w[0]).collect();
        Ok(Self {
            base,
            shifted,
            epsilon,
            noise_seed: None,
            growth,
        })
    }

    /// Builds the coupling from two paths and the logs of their gaps, which
    /// stay exact where the literal difference has rounded away.
    pub fn from_log_gaps(base: Path, shifted: Path, log_gaps: &[f64]) -> Result<Self> {
        base.ensure_same_grid(&shifted)?;
        if log_gaps.len() != base.values().len() {
            return Err(Error::GridMismatch(format!(
                "{} log gaps for {} grid points",
                log_gaps.len(),
                base.values().len()
            )));
        }
        if let Some(step) = log_gaps.iter().position(|l| !l.is_finite()) {
            return Err(Error::BrokenCoupling {
                step,
                reason: "log gap is not finite".into(),
            });
        }
        let epsilon = log_gaps[0].exp();
        let growth = log_gaps.windows(2).map(|w| (w[1] - w[0]).exp()).collect();
        Ok(Self {
            base,
            shifted,
            epsilon,
            noise_seed: None,
            growth,
        })
    }

    /// `g_i = d_{i+1} / d_i`, one per step.
    pub fn growth_factors(&self) -> &[f64] {
        &self.growth
    }

    /// `d_i / d_j` for `j <= i`.
    pub fn gap_ratio(&self, i: usize, j: usize) -> f64 {
        self.growth[j..i].iter().product()
    }

    /// Natural log of the gap `d_i`; finite even where `d_i` itself underflows.
    pub fn log_gap(&self, i: usize) -> f64 {
        self.epsilon.ln() + self.growth[..i].iter().map(|g| g.ln()).sum::<f64>()
    }

    /// `log_gap(i)` for every grid point.
    pub fn log_gaps(&self) -> Vec<f64> {
        let mut acc = self.epsilon.ln();
        let mut out = Vec::with_capacity(self.growth.len() + 1);
        out.push(acc);
        for g in &self.growth {
            acc += g.ln();
            out.push(acc);
        }
        out
    }
}

/// Solves the SDE from `x0` and `x0 + epsilon` with the same noise.
pub fn solve_coupled(cfg: &SdeConfig, epsilon: f64, noise: &Path) -> Result<CoupledPaths> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::param("epsilon", format!("must be finite and > 0, got {epsilon}")));
    }
    let base = solve_euler(cfg, noise)?;
    let shifted = solve_euler(&cfg.with_x0(cfg.x0 + epsilon), noise)?;

    let dt = cfg.grid.step();
    let m = cfg.drift.dissipativity();
    let slack = 1.0 + cfg.contraction_slack();
    let mut growth = Vec::with_capacity(cfg.grid.steps());
    let mut gap = epsilon;
    let mut log_gap = epsilon.ln();
    let log_slack = slack.ln();
    let mut scale: f64 = 1.0;
    for (i, (&xb, (&xs, t))) in base
        .values()
        .iter()
        .zip(shifted.values().iter().zip(cfg.grid.times()))
        .enumerate()
    {
        // Compared in logs: the bound itself underflows after a few hundred time units.
        let log_bound = epsilon.ln() - m * t + log_slack;
        let bound = log_bound.exp();
        // Both Euler runs round independently; contraction keeps the
        // accumulated difference within about ulp / (M step).
        scale = scale.max(xb.abs()).max(xs.abs());
        let rounding = 4.0 * f64::EPSILON * scale * (1.0 / (m * dt)).min((i + 1) as f64);
        if log_gap > log_bound + 1e-12 * log_bound.abs() || xs - xb > bound + rounding {
            return Err(Error::BrokenCoupling {
                step: i,
                reason: format!("gap exceeds contraction bound {bound:e}"),
            });
        }
        if xs < xb - rounding {
            return Err(Error::BrokenCoupling {
                step: i,
                reason: "shifted path crossed below base path".into(),
            });
        }
        if i == cfg.grid.steps() {
            break;
        }
        let g = 1.0 + dt * cfg.drift.secant_slope(xb, gap);
        if !(g > 0.0 && g.is_finite()) {
            return Err(Error::BrokenCoupling {
                step: i,
                reason: format!("gap growth factor {g} is not positive"),
            });
        }
        growth.push(g);
        gap *= g;
        log_gap += g.ln();
    }
    Ok(CoupledPaths {
        base,
        shifted,
        epsilon,
        noise_seed: None,
        growth,
    })
}

/// A path started from (approximate) stationarity plus the noise that drives it on `[0, T]`.
#[derive(Debug, Clone)]
pub struct StationarySample {
    pub path: Path,
    /// Driving fBm on `[0, T]`, rebased so that `noise(0) = 0`.
    pub noise: Path,
}

impl StationarySample {
    /// Coupled pair started at `X(0)` and `X(0) + epsilon` with this sample's noise.
    pub fn coupled(&self, cfg: &SdeConfig, epsilon: f64) -> Result<CoupledPaths> {
        solve_coupled(&cfg.with_x0(self.path.first()), epsilon, &self.noise)
    }
}

/// Reusable generator for burn-in initialized paths on a fixed grid.
#[derive(Debug, Clone)]
pub struct StationarySampler {
    cfg: SdeConfig,
    burn_steps: usize,
    generator: FgnFft,
}

impl StationarySampler {
    /// `cfg.x0` is where the burn-in starts; `burn_in` must be at least `10 / M`.
    pub fn new(cfg: SdeConfig, burn_in: f64) -> Result<Self> {
        let min = 10.0 / cfg.drift.dissipativity();
        if !(burn_in >= min * (1.0 - 1e-12)) {
            return Err(Error::param(
                "burn_in",
                format!("must be at least 10/M = {min}, got {burn_in}"),
            ));
        }
        let dt = cfg.grid.step();
        let burn_steps = (burn_in / dt - 1e-9).ceil() as usize;
        let total = burn_steps + cfg.grid.steps();
        let full = TimeGrid::new(total as f64 * dt, total)?;
        let generator = FgnFft::new(cfg.hurst.value(), full)?;
        Ok(Self {
            cfg,
            burn_steps,
            generator,
        })
    }

    pub fn config(&self) -> &SdeConfig {
        &self.cfg
    }

    pub fn sample(&self, seed: SeedSpec) -> Result<StationarySample> {
        let mut rng = seed.rng();
        let inc = self.generator.sample_increments(&mut rng);
        let dt = self.cfg.grid.step();
        let mut x = self.cfg.x0;
        for (i, db) in inc[..self.burn_steps].iter().enumerate() {
            x = x + self.cfg.drift.value(x) * dt + self.cfg.sigma * db;
            if !x.is_finite() {
                return Err(Error::NonFinite { step: i + 1 });
            }
        }
        let mut noise = Vec::with_capacity(self.cfg.grid.steps() + 1);
        let mut acc = 0.0;
        noise.push(acc);
        for db in &inc[self.burn_steps..] {
            acc += db;
            noise.push(acc);
        }
        let noise = Path::new(self.cfg.grid, noise)?;
        let path = solve_euler(&self.cfg.with_x0(x), &noise)?;
        Ok(StationarySample { path, noise })
    }
}

/// Fractional Ornstein-Uhlenbeck path started from 0 at `-burn_in` and
/// observed on `[0, T]`; `burn_in` defaults to `10 / lambda`.
pub fn stationary_ou_path(
    lambda: f64,
    sigma: f64,
    grid: TimeGrid,
    hurst: HurstIndex,
    seed: SeedSpec,
    burn_in: Option<f64>,
) -> Result<Path> {
    let cfg = SdeConfig::new(DriftModel::linear(lambda)?, sigma, 0.0, grid, hurst)?;
    let burn_in = burn_in.unwrap_or(10.0 / lambda);
    Ok(StationarySampler::new(cfg, burn_in)?.sample(seed)?.path)
}
