//! Pathwise (Young) integrals and the Skorokhod correction term.
//!
//! For `phi` in `Lip_b^1` and `X` solving the SDE from `x`,
//!
//! ```text
//! int phi(X) dX (Skorokhod) = int phi(X) dX (Young)
//!     - alpha_H sigma^2 int_0^t int_0^u phi'(X(u)) R(u, v) |u - v|^(2H-2) dv du
//! ```
//!
//! with `alpha_H = H (2H - 1)` and `R(u, v) = dX(u)/dx / dX(v)/dx`.
//!
//! On the grid both integrals are taken over whole cells. Cell `j` of the
//! inner variable enters the Euler state at step `j + 1`, so its ratio is
//! `R(t_i, t_{j+1})`, and the singular kernel is integrated exactly over the
//! cell pair, which gives `Cov(dB_j, dB_i) / alpha_H`. With these choices the
//! discrete correction is the exact divergence correction of the left-point
//! Riemann sum under the Euler scheme. The double sum is streamed over the
//! outer index with O(n) memory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fgn::{fgn_autocovariance, HurstIndex};
use crate::grid::{Path, TimeGrid};
use crate::sde::{CoupledPaths, DriftModel};

/// Ratios below this are dropped from the inner sum once the propagator is
/// known to be contractive; the remaining tail is far below double precision.
const TAIL_CUTOFF: f64 = 1e-32;

/// Left-point Riemann sum `sum_k x(t_k) (w(t_{k+1}) - w(t_k))`.
pub fn young_integral(integrand: &Path, integrator: &Path) -> Result<f64> {
    integrand.ensure_same_grid(integrator)?;
    Ok(young_sum(integrand.values(), integrator.values()))
}

pub(crate) fn young_sum(integrand: &[f64], integrator: &[f64]) -> f64 {
    integrand
        .iter()
        .zip(integrator.windows(2))
        .map(|(x, w)| x * (w[1] - w[0]))
        .sum()
}

/// `int_{cell} (u - v)^(2H-2) dv` in closed form, for a cell left of `u`.
pub fn inner_kernel_integral(u: f64, cell: (f64, f64), hurst: HurstIndex) -> Result<f64> {
    let (lo, hi) = cell;
    if !(lo < hi) {
        return Err(Error::param("cell", format!("empty cell [{lo}, {hi}]")));
    }
    if hi > u {
        return Err(Error::param(
            "cell",
            format!("cell [{lo}, {hi}] is not left of u = {u}"),
        ));
    }
    let p = 2.0 * hurst.value() - 1.0;
    Ok(((u - lo).powf(p) - (u - hi).powf(p)) / p)
}

/// `int_{cell i} int_{cell i-lag} |u - v|^(2H-2) dv du` for cells of width `step`, `lag >= 1`.
pub fn cell_pair_integral(lag: usize, step: f64, hurst: HurstIndex) -> f64 {
    debug_assert!(lag >= 1);
    step.powf(2.0 * hurst.value()) * lag_covariance(hurst.value(), lag) / hurst.alpha()
}

/// fGn autocovariance at `lag`, with an asymptotic series where the direct
/// second difference would cancel.
fn lag_covariance(hurst: f64, lag: usize) -> f64 {
    if lag < 64 {
        return fgn_autocovariance(hurst, lag);
    }
    let p = 2.0 * hurst;
    let k = lag as f64;
    let k2 = 1.0 / (k * k);
    let c2 = p * (p - 1.0);
    let c4 = c2 * (p - 2.0) * (p - 3.0) / 12.0;
    let c6 = c4 * (p - 4.0) * (p - 5.0) / 30.0;
    0.5 * k.powf(p - 2.0) * (c2 + k2 * (c4 + k2 * c6))
}

/// How `R(u, v)` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    /// Closed-form propagator of the linear drift, `(1 - lambda step)` per step.
    ExactLinear,
    /// Ratio of gaps between paths started at `x0 + eps` and `x0`.
    Coupled,
    /// Euler tangent flow `prod (1 + step b'(X_k))`, needs the drift.
    Derivative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionSpec {
    pub hurst: HurstIndex,
    pub sigma: f64,
    pub mode: RatioMode,
}

impl CorrectionSpec {
    pub fn new(hurst: HurstIndex, sigma: f64, mode: RatioMode) -> Self {
        Self { hurst, sigma, mode }
    }

    pub fn alpha(&self) -> f64 {
        self.hurst.alpha()
    }
}

/// Where the ratio comes from.
#[derive(Debug, Clone, Copy)]
pub enum RatioSource<'a> {
    Coupled(&'a CoupledPaths),
    Model { drift: &'a DriftModel, path: &'a Path },
}

impl<'a> RatioSource<'a> {
    fn path(&self) -> &'a Path {
        match self {
            RatioSource::Coupled(c) => &c.base,
            RatioSource::Model { path, .. } => path,
        }
    }

    /// Per-step factors `g_k` with `R(t_i, t_j) = prod_{k=j}^{i-1} g_k`.
    pub fn growth_factors(&self, mode: RatioMode) -> Result<Vec<f64>> {
        let dt = self.path().grid().step();
        let factors: Vec<f64> = match (mode, self) {
            (RatioMode::Coupled, RatioSource::Coupled(c)) => c.growth_factors().to_vec(),
            (RatioMode::Derivative, RatioSource::Model { drift, path }) => {
                let v = path.values();
                v[..v.len() - 1].iter().map(|&x| 1.0 + dt * drift.deriv(x)).collect()
            }
            (RatioMode::ExactLinear, RatioSource::Model { drift, path }) => {
                let lambda = drift.linear_rate().ok_or_else(|| {
                    Error::param("mode", "exact_linear_ratio needs the linear drift model")
                })?;
                vec![1.0 - lambda * dt; path.grid().steps()]
            }
            (RatioMode::Coupled, _) => {
                return Err(Error::param("mode", "coupled ratio needs coupled paths"))
            }
            (_, RatioSource::Coupled(_)) => {
                return Err(Error::param("mode", "this ratio mode needs the drift model and path"))
            }
        };
        if let Some(step) = factors.iter().position(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::BrokenCoupling {
                step,
                reason: format!("ratio denominator vanishes (growth factor {})", factors[step]),
            });
        }
        Ok(factors)
    }
}

/// Precomputed inner sums of the correction for one path and ratio mode.
///
/// `weights[i] = sum_{j<i} R(t_i, t_{j+1}) * cell_pair_integral(i - j)`, so
/// the correction for any `phi` is `alpha_H sigma^2 sum_i phi'(X_i) weights[i]`.
/// Only the kernel changes across evaluation points, so one instance serves
/// a whole x-grid.
#[derive(Debug, Clone)]
pub struct SkorokhodWeights {
    grid: TimeGrid,
    scale: f64,
    weights: Vec<f64>,
}

impl SkorokhodWeights {
    pub fn new(source: RatioSource<'_>, spec: &CorrectionSpec) -> Result<Self> {
        let grid = *source.path().grid();
        let growth = source.growth_factors(spec.mode)?;
        Ok(Self::from_growth(grid, &growth, spec))
    }

    fn from_growth(grid: TimeGrid, growth: &[f64], spec: &CorrectionSpec) -> Self {
        let n = grid.steps();
        let dt = grid.step();
        let pair: Vec<f64> = (0..=n)
            .map(|m| if m == 0 { 0.0 } else { cell_pair_integral(m, dt, spec.hurst) })
            .collect();
        let contractive = growth.iter().all(|&g| g <= 1.0);
        let mut weights = vec![0.0; n];
        for (i, w) in weights.iter_mut().enumerate() {
            let mut acc = 0.0;
            let mut ratio = 1.0;
            for m in 1..=i {
                acc += pair[m] * ratio;
                ratio *= growth[i - m];
                if contractive && ratio < TAIL_CUTOFF {
                    break;
                }
            }
            *w = acc;
        }
        Self {
            grid,
            scale: spec.alpha() * spec.sigma * spec.sigma,
            weights,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `alpha_H sigma^2 sum_i phi'(X_i) weights[i]` for `phi'` sampled on the grid.
    pub fn correction(&self, phi_prime: &[f64]) -> f64 {
        self.scale * phi_prime.iter().zip(&self.weights).map(|(d, w)| d * w).sum::<f64>()
    }

    /// Like [`correction`](Self::correction) for a sparse `phi'`: `(index, value)` pairs.
    pub fn correction_sparse(&self, phi_prime: impl Iterator<Item = (usize, f64)>) -> f64 {
        self.scale * phi_prime.map(|(i, d)| d * self.weights[i]).sum::<f64>()
    }
}

/// The double-integral correction for `phi'` sampled along the path.
pub fn skorokhod_correction(
    kernel_deriv_path: &Path,
    source: RatioSource<'_>,
    spec: &CorrectionSpec,
) -> Result<f64> {
    kernel_deriv_path.ensure_same_grid(source.path())?;
    let w = SkorokhodWeights::new(source, spec)?;
    Ok(w.correction(kernel_deriv_path.values()))
}

/// Skorokhod integral of `phi(X)` against `X`: the Young sum minus the correction.
pub fn skorokhod_integral_of_kernel(
    kernel_path: &Path,
    kernel_deriv_path: &Path,
    integrator: &Path,
    source: RatioSource<'_>,
    spec: &CorrectionSpec,
) -> Result<f64> {
    let pathwise = young_integral(kernel_path, integrator)?;
    Ok(pathwise - skorokhod_correction(kernel_deriv_path, source, spec)?)
}

/// Skorokhod integral of `phi(X)` against the driving noise `B`:
/// `(int phi(X) dX - int phi(X) b(X) ds) / sigma` minus the correction over `sigma`.
pub fn skorokhod_against_noise(
    kernel_path: &Path,
    kernel_deriv_path: &Path,
    x: &Path,
    drift: &DriftModel,
    source: RatioSource<'_>,
    spec: &CorrectionSpec,
) -> Result<f64> {
    let against_x = skorokhod_integral_of_kernel(kernel_path, kernel_deriv_path, x, source, spec)?;
    let dt = x.grid().step();
    let drift_part: f64 = kernel_path
        .values()
        .iter()
        .zip(&x.values()[..x.values().len() - 1])
        .map(|(phi, &xi)| phi * drift.value(xi) * dt)
        .sum();
    Ok((against_x - drift_part) / spec.sigma)
}
