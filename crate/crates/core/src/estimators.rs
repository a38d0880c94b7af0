//! Kernel estimators of the occupation density and of the drift.
//!
//! With `K_i = K((X(t_i) - x) / h)` and left-point sums over `i < n`:
//!
//! * density `f = step * sum K_i / (T h)`;
//! * pathwise `b~ = sum K_i (X_{i+1} - X_i) / (step * sum K_i)`;
//! * corrected `b^ = (sum K_i (X_{i+1} - X_i) - C) / (step * sum K_i)` where
//!   `C` is the Skorokhod correction with `phi' = K'((X - x) / h) / h`.
//!
//! Which ratio enters `C` decides the estimator: gaps of coupled paths give the
//! computable `b^_eps`, the drift's own derivative gives the oracle version.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fgn::HurstIndex;
use crate::grid::Path;
use crate::integrals::{CorrectionSpec, RatioMode, RatioSource, SkorokhodWeights};
use crate::quad;
use crate::sde::{CoupledPaths, DriftModel};
use crate::stats;

/// Below `DEGENERACY_LEVEL / h` the density estimate is too small to divide by.
pub const DEGENERACY_LEVEL: f64 = 1e-3;

pub fn degeneracy_threshold(h: f64) -> f64 {
    DEGENERACY_LEVEL / h
}

/// A compactly supported `C^1` kernel on `[-1, 1]`.
#[derive(Clone, Copy)]
pub struct Kernel {
    name: &'static str,
    k: fn(f64) -> f64,
    k_prime: fn(f64) -> f64,
    k_primitive: fn(f64) -> f64,
    sup_k: f64,
    sup_k_prime: f64,
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Kernel").field("name", &self.name).finish()
    }
}

impl PartialEq for Kernel {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
    }
}

fn biweight(y: f64) -> f64 {
    if y.abs() > 1.0 {
        return 0.0;
    }
    let u = 1.0 - y * y;
    15.0 / 16.0 * u * u
}

fn biweight_prime(y: f64) -> f64 {
    if y.abs() > 1.0 {
        return 0.0;
    }
    -15.0 / 4.0 * y * (1.0 - y * y)
}

fn biweight_primitive(y: f64) -> f64 {
    if y <= -1.0 {
        return 0.0;
    }
    if y >= 1.0 {
        return 1.0;
    }
    15.0 / 16.0 * ((y + 1.0) - 2.0 * (y.powi(3) + 1.0) / 3.0 + (y.powi(5) + 1.0) / 5.0)
}

fn raised_cosine(y: f64) -> f64 {
    if y.abs() > 1.0 {
        return 0.0;
    }
    0.5 * (1.0 + (std::f64::consts::PI * y).cos())
}

fn raised_cosine_prime(y: f64) -> f64 {
    if y.abs() > 1.0 {
        return 0.0;
    }
    -std::f64::consts::FRAC_PI_2 * (std::f64::consts::PI * y).sin()
}

fn raised_cosine_primitive(y: f64) -> f64 {
    if y <= -1.0 {
        return 0.0;
    }
    if y >= 1.0 {
        return 1.0;
    }
    0.5 * ((y + 1.0) + (std::f64::consts::PI * y).sin() / std::f64::consts::PI)
}

impl Kernel {
    /// `(15/16) (1 - y^2)^2` on `[-1, 1]`.
    pub fn biweight() -> Self {
        Self::from_parts(
            "biweight",
            biweight,
            biweight_prime,
            biweight_primitive,
            15.0 / 16.0,
            5.0 / (2.0 * 3f64.sqrt()),
        )
        .expect("biweight kernel validates")
    }

    /// Raised cosine `(1 + cos(pi y)) / 2` on `[-1, 1]`.
    pub fn cosine() -> Self {
        Self::from_parts(
            "cosine",
            raised_cosine,
            raised_cosine_prime,
            raised_cosine_primitive,
            1.0,
            std::f64::consts::FRAC_PI_2,
        )
        .expect("cosine kernel validates")
    }

    /// Builds a kernel after checking support, sign, mass, smoothness, the
    /// primitive (`int_{-1}^y K`) and the two sup norms.
    pub fn from_parts(
        name: &'static str,
        k: fn(f64) -> f64,
        k_prime: fn(f64) -> f64,
        k_primitive: fn(f64) -> f64,
        sup_k: f64,
        sup_k_prime: f64,
    ) -> Result<Self> {
        let fail = |reason: String| Error::InvalidKernel {
            kernel: name.to_string(),
            reason,
        };
        let edge = 1.0 + 1e-9;
        for y in [-edge, edge, -2.0, 2.0, 10.0] {
            if k(y) != 0.0 || k_prime(y) != 0.0 {
                return Err(fail(format!("nonzero outside [-1, 1] at y = {y}")));
            }
        }
        if k_prime(-1.0).abs() > 1e-9 || k_prime(1.0).abs() > 1e-9 {
            return Err(fail("derivative does not vanish at the support edge".into()));
        }
        let mass = quad::integrate(k, -1.0, 1.0, 1e-13, 1e-13)?;
        if (mass - 1.0).abs() > 1e-8 {
            return Err(fail(format!("integrates to {mass}, not 1")));
        }
        if (k_primitive(-1.0)).abs() > 1e-12 || (k_primitive(1.0) - 1.0).abs() > 1e-8 {
            return Err(fail("primitive is not int_{-1}^y K".into()));
        }
        let (mut max_k, mut max_kp) = (0.0f64, 0.0f64);
        let fd = 1e-7;
        for i in 0..=2000 {
            let y = -1.0 + i as f64 * 1e-3;
            let v = k(y);
            if v < 0.0 {
                return Err(fail(format!("negative at y = {y}")));
            }
            max_k = max_k.max(v);
            max_kp = max_kp.max(k_prime(y).abs());
            let dk = (k(y + fd) - k(y - fd)) / (2.0 * fd);
            if (dk - k_prime(y)).abs() > 1e-6 {
                return Err(fail(format!("derivative mismatch at y = {y}")));
            }
            let dp = (k_primitive(y + fd) - k_primitive(y - fd)) / (2.0 * fd);
            if (y.abs() < 1.0 - fd) && (dp - v).abs() > 1e-6 {
                return Err(fail(format!("primitive mismatch at y = {y}")));
            }
        }
        let sup_ok = |claimed: f64, seen: f64| seen <= claimed * (1.0 + 1e-9) && seen >= claimed * (1.0 - 1e-3);
        if !sup_ok(sup_k, max_k) || !sup_ok(sup_k_prime, max_kp) {
            return Err(fail(format!(
                "sup norms ({sup_k}, {sup_k_prime}) disagree with sampled ({max_k}, {max_kp})"
            )));
        }
        Ok(Self {
            name,
            k,
            k_prime,
            k_primitive,
            sup_k,
            sup_k_prime,
        })
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn value(&self, y: f64) -> f64 {
        (self.k)(y)
    }

    pub fn deriv(&self, y: f64) -> f64 {
        (self.k_prime)(y)
    }

    pub fn primitive(&self, y: f64) -> f64 {
        (self.k_primitive)(y)
    }

    pub fn sup(&self) -> f64 {
        self.sup_k
    }

    pub fn sup_deriv(&self) -> f64 {
        self.sup_k_prime
    }

    /// `K_h(y) = K(y / h) / h`.
    pub fn scaled(&self, y: f64, h: f64) -> f64 {
        self.value(y / h) / h
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "biweight" => Ok(Kernel::biweight()),
            "cosine" => Ok(Kernel::cosine()),
            other => Err(Error::param(
                "kernel",
                format!("unknown kernel `{other}` (expected biweight or cosine)"),
            )),
        }
    }
}

fn parse_fixed(name: &'static str, s: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| Error::param(name, format!("`{s}` is not a number")))?;
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::param(name, format!("must be positive and finite, got {v}")));
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    Fixed(f64),
    /// `h(T) = T^((H - 1) / 3)`.
    PowerLaw,
}

impl FromStr for BandwidthRule {
    type Err = Error;

    /// `fixed:<h>` or `power`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "power" {
            return Ok(BandwidthRule::PowerLaw);
        }
        match s.strip_prefix("fixed:") {
            Some(v) => Ok(BandwidthRule::Fixed(parse_fixed("bandwidth", v.trim())?)),
            None => Err(Error::param(
                "bandwidth",
                format!("`{s}` is neither `power` nor `fixed:<h>`"),
            )),
        }
    }
}

impl fmt::Display for BandwidthRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BandwidthRule::Fixed(h) => write!(f, "fixed:{h}"),
            BandwidthRule::PowerLaw => f.write_str("power"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonRule {
    Fixed(f64),
    /// `eps(T) = h(T)^2`.
    SquaredBandwidth,
}

impl FromStr for EpsilonRule {
    type Err = Error;

    /// `fixed:<eps>` or `squared`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "squared" {
            return Ok(EpsilonRule::SquaredBandwidth);
        }
        match s.strip_prefix("fixed:") {
            Some(v) => Ok(EpsilonRule::Fixed(parse_fixed("epsilon", v.trim())?)),
            None => Err(Error::param(
                "epsilon",
                format!("`{s}` is neither `squared` nor `fixed:<eps>`"),
            )),
        }
    }
}

impl fmt::Display for EpsilonRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EpsilonRule::Fixed(e) => write!(f, "fixed:{e}"),
            EpsilonRule::SquaredBandwidth => f.write_str("squared"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSchedule {
    pub rule: BandwidthRule,
    pub epsilon_rule: EpsilonRule,
}

impl BandwidthSchedule {
    pub fn new(rule: BandwidthRule, epsilon_rule: EpsilonRule) -> Self {
        Self { rule, epsilon_rule }
    }

    pub fn power_law() -> Self {
        Self::new(BandwidthRule::PowerLaw, EpsilonRule::SquaredBandwidth)
    }
}

/// Bandwidth and coupling offset at horizon `T`.
pub fn schedule_eval(schedule: &BandwidthSchedule, horizon: f64, hurst: HurstIndex) -> Result<(f64, f64)> {
    let h = match schedule.rule {
        BandwidthRule::Fixed(h) => h,
        BandwidthRule::PowerLaw => {
            if !(horizon > 1.0) {
                return Err(Error::param(
                    "horizon",
                    format!("power schedule needs T > 1, got {horizon}"),
                ));
            }
            horizon.powf((hurst.value() - 1.0) / 3.0)
        }
    };
    let eps = match schedule.epsilon_rule {
        EpsilonRule::Fixed(e) => e,
        EpsilonRule::SquaredBandwidth => h * h,
    };
    Ok((h, eps))
}

fn check_bandwidth(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::param("h", format!("must be positive, got {h}")));
    }
    Ok(())
}

/// Occupation-density estimate at `x`.
pub fn density_estimate(path: &Path, x: f64, h: f64, kernel: &Kernel) -> Result<f64> {
    check_bandwidth(h)?;
    let v = path.values();
    let sum: f64 = v[..v.len() - 1].iter().map(|xi| kernel.value((xi - x) / h)).sum();
    let g = path.grid();
    Ok(sum * g.step() / (g.horizon() * h))
}

/// Pathwise estimate by both routes. Values are NaN when `degenerate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathwiseEstimate {
    pub f_hat: f64,
    /// Young sum over the grid.
    pub riemann: f64,
    /// `[Kp((X(T) - x) / h) - Kp((X(0) - x) / h)] / (T f)` with `Kp` the primitive.
    pub closed_form: f64,
    pub degenerate: bool,
}

pub fn pathwise_estimate(path: &Path, x: f64, h: f64, kernel: &Kernel) -> Result<PathwiseEstimate> {
    check_bandwidth(h)?;
    let s = LocalSums::new(path, x, h, kernel);
    let horizon = path.grid().horizon();
    let f_hat = s.f_hat(path, h);
    if f_hat < degeneracy_threshold(h) {
        return Ok(PathwiseEstimate {
            f_hat,
            riemann: f64::NAN,
            closed_form: f64::NAN,
            degenerate: true,
        });
    }
    let closed = kernel.primitive((path.last() - x) / h) - kernel.primitive((path.first() - x) / h);
    Ok(PathwiseEstimate {
        f_hat,
        riemann: s.pathwise / s.occupation(path),
        closed_form: closed / (horizon * f_hat),
        degenerate: false,
    })
}

/// One corrected drift estimate. Values are NaN when `degenerate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftEstimate {
    pub f_hat: f64,
    pub pathwise: f64,
    pub estimate: f64,
    /// `pathwise - estimate`.
    pub correction: f64,
    pub degenerate: bool,
}

/// `b^_eps` from a coupled pair; the offset is `paths.epsilon`.
pub fn drift_estimate_eps(
    paths: &CoupledPaths,
    sigma: f64,
    hurst: HurstIndex,
    x: f64,
    h: f64,
    kernel: &Kernel,
) -> Result<DriftEstimate> {
    let spec = CorrectionSpec::new(hurst, sigma, RatioMode::Coupled);
    DriftEstimator::new(RatioSource::Coupled(paths), spec)?.estimate(x, h, kernel)
}

/// Oracle estimate with the drift's own tangent flow as ratio.
pub fn drift_estimate_skorokhod(
    path: &Path,
    drift: &DriftModel,
    sigma: f64,
    hurst: HurstIndex,
    x: f64,
    h: f64,
    kernel: &Kernel,
) -> Result<DriftEstimate> {
    let spec = CorrectionSpec::new(hurst, sigma, RatioMode::Derivative);
    DriftEstimator::new(RatioSource::Model { drift, path }, spec)?.estimate(x, h, kernel)
}

/// Kernel sums over the part of the path that falls inside the window.
struct LocalSums {
    kernel_sum: f64,
    pathwise: f64,
    /// `(index, K'_i)` for grid points inside the window.
    deriv: Vec<(usize, f64)>,
}

impl LocalSums {
    fn new(path: &Path, x: f64, h: f64, kernel: &Kernel) -> Self {
        let v = path.values();
        let mut s = LocalSums {
            kernel_sum: 0.0,
            pathwise: 0.0,
            deriv: Vec::new(),
        };
        for (i, w) in v.windows(2).enumerate() {
            let y = (w[0] - x) / h;
            if y.abs() >= 1.0 {
                continue;
            }
            let k = kernel.value(y);
            s.kernel_sum += k;
            s.pathwise += k * (w[1] - w[0]);
            s.deriv.push((i, kernel.deriv(y)));
        }
        s
    }

    fn occupation(&self, path: &Path) -> f64 {
        self.kernel_sum * path.grid().step()
    }

    fn f_hat(&self, path: &Path, h: f64) -> f64 {
        self.occupation(path) / (path.grid().horizon() * h)
    }
}

/// The two terms of `b^ - b(x) = (B + S) / f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Decomposition {
    pub f_hat: f64,
    /// `(1 / (T h)) int K((X - x) / h) (b(X) - b(x)) ds`.
    pub bias: f64,
    /// `(sigma / (T h)) int K((X - x) / h) dB`, Skorokhod sense.
    pub stochastic: f64,
    pub estimate: f64,
}

/// Corrected estimator for one path, reusable across `x` and `h`.
///
/// Building it costs one pass of the O(n * memory) correction weights; each
/// evaluation point then costs O(n).
#[derive(Debug, Clone)]
pub struct DriftEstimator<'a> {
    path: &'a Path,
    spec: CorrectionSpec,
    weights: SkorokhodWeights,
}

impl<'a> DriftEstimator<'a> {
    pub fn new(source: RatioSource<'a>, spec: CorrectionSpec) -> Result<Self> {
        let path = match source {
            RatioSource::Coupled(c) => &c.base,
            RatioSource::Model { path, .. } => path,
        };
        let weights = SkorokhodWeights::new(source, &spec)?;
        Ok(Self { path, spec, weights })
    }

    pub fn path(&self) -> &Path {
        self.path
    }

    pub fn spec(&self) -> &CorrectionSpec {
        &self.spec
    }

    fn correction_total(&self, s: &LocalSums, h: f64) -> f64 {
        self.weights.correction_sparse(s.deriv.iter().map(|&(i, d)| (i, d / h)))
    }

    pub fn estimate(&self, x: f64, h: f64, kernel: &Kernel) -> Result<DriftEstimate> {
        check_bandwidth(h)?;
        let s = LocalSums::new(self.path, x, h, kernel);
        let f_hat = s.f_hat(self.path, h);
        if f_hat < degeneracy_threshold(h) {
            return Ok(DriftEstimate {
                f_hat,
                pathwise: f64::NAN,
                estimate: f64::NAN,
                correction: f64::NAN,
                degenerate: true,
            });
        }
        let occ = s.occupation(self.path);
        let c = self.correction_total(&s, h);
        let pathwise = s.pathwise / occ;
        let estimate = (s.pathwise - c) / occ;
        Ok(DriftEstimate {
            f_hat,
            pathwise,
            estimate,
            correction: pathwise - estimate,
            degenerate: false,
        })
    }

    /// Bias and stochastic terms, computed separately from the estimate.
    pub fn decomposition(&self, x: f64, h: f64, kernel: &Kernel, drift: &DriftModel) -> Result<Decomposition> {
        check_bandwidth(h)?;
        let s = LocalSums::new(self.path, x, h, kernel);
        let g = self.path.grid();
        let (dt, horizon) = (g.step(), g.horizon());
        let v = self.path.values();
        let bx = drift.value(x);
        let (mut bias, mut drift_part) = (0.0, 0.0);
        for &(i, _) in &s.deriv {
            let k = kernel.value((v[i] - x) / h);
            let b = drift.value(v[i]);
            bias += k * (b - bx) * dt;
            drift_part += k * b * dt;
        }
        let c = self.correction_total(&s, h);
        let sigma = self.spec.sigma;
        // Skorokhod integral of K((X - x) / h) against B.
        let against_noise = (s.pathwise - c - drift_part) / sigma;
        let f_hat = s.f_hat(self.path, h);
        Ok(Decomposition {
            f_hat,
            bias: bias / (horizon * h),
            stochastic: sigma * against_noise / (horizon * h),
            estimate: (s.pathwise - c) / s.occupation(self.path),
        })
    }
}

/// Estimates on an x-grid with the arrays aligned to `x_grid`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorOutput {
    pub x_grid: Vec<f64>,
    pub f_hat: Vec<f64>,
    pub b_tilde: Vec<f64>,
    pub b_hat_eps: Vec<f64>,
    pub correction: Vec<f64>,
    pub h_used: f64,
    pub eps_used: f64,
    pub t_used: f64,
    pub degenerate_mask: Vec<bool>,
}

impl EstimatorOutput {
    pub fn len(&self) -> usize {
        self.x_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_grid.is_empty()
    }
}

/// Runs the coupled-pair estimator at every point of `x_grid`.
pub fn estimate_grid(
    paths: &CoupledPaths,
    sigma: f64,
    hurst: HurstIndex,
    x_grid: &[f64],
    h: f64,
    kernel: &Kernel,
) -> Result<EstimatorOutput> {
    let spec = CorrectionSpec::new(hurst, sigma, RatioMode::Coupled);
    let est = DriftEstimator::new(RatioSource::Coupled(paths), spec)?;
    let mut out = EstimatorOutput {
        x_grid: x_grid.to_vec(),
        f_hat: Vec::with_capacity(x_grid.len()),
        b_tilde: Vec::with_capacity(x_grid.len()),
        b_hat_eps: Vec::with_capacity(x_grid.len()),
        correction: Vec::with_capacity(x_grid.len()),
        h_used: h,
        eps_used: paths.epsilon,
        t_used: paths.base.grid().horizon(),
        degenerate_mask: Vec::with_capacity(x_grid.len()),
    };
    for &x in x_grid {
        let e = est.estimate(x, h, kernel)?;
        out.f_hat.push(e.f_hat);
        out.b_tilde.push(e.pathwise);
        out.b_hat_eps.push(e.estimate);
        out.correction.push(e.correction);
        out.degenerate_mask.push(e.degenerate);
    }
    Ok(out)
}

/// Deciles 0.1..0.9 of `sample` followed by `extra`.
pub fn default_x_grid(sample: &[f64], extra: &[f64]) -> Vec<f64> {
    let mut xs: Vec<f64> = (1..=9).map(|k| stats::quantile(sample, k as f64 / 10.0)).collect();
    xs.extend_from_slice(extra);
    xs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fgn::sample_fgn_fft;
    use crate::grid::{SeedSpec, TimeGrid};
    use crate::sde::{solve_coupled, SdeConfig};

    fn hurst() -> HurstIndex {
        HurstIndex::new(0.7).unwrap()
    }

    #[test]
    fn catalog_kernels_validate() {
        for k in [Kernel::biweight(), Kernel::cosine()] {
            assert_eq!(k.value(1.0 + 1e-9), 0.0);
            assert!(k.deriv(1.0).abs() < 1e-9);
            assert_eq!(k.primitive(-3.0), 0.0);
            assert_eq!(k.primitive(3.0), 1.0);
        }
        assert_eq!("cosine".parse::<Kernel>().unwrap().name(), "cosine");
        assert!("epanechnikov".parse::<Kernel>().is_err());
    }

    #[test]
    fn epanechnikov_is_rejected() {
        fn k(y: f64) -> f64 {
            if y.abs() > 1.0 { 0.0 } else { 0.75 * (1.0 - y * y) }
        }
        fn kp(y: f64) -> f64 {
            if y.abs() > 1.0 { 0.0 } else { -1.5 * y }
        }
        fn kk(y: f64) -> f64 {
            let y = y.clamp(-1.0, 1.0);
            0.75 * (y - y.powi(3) / 3.0) + 0.5
        }
        assert!(matches!(
            Kernel::from_parts("epanechnikov", k, kp, kk, 0.75, 1.5),
            Err(Error::InvalidKernel { .. })
        ));
    }

    #[test]
    fn rescaled_kernel_has_unit_mass() {
        for k in [Kernel::biweight(), Kernel::cosine()] {
            for h in [0.1, 0.5, 1.0] {
                let dy = 1e-4;
                let total: f64 = (-20_000..=20_000).map(|i| k.scaled(i as f64 * dy, h) * dy).sum();
                assert!((total - 1.0).abs() < 1e-6, "{} h={h}: {total}", k.name());
            }
        }
    }

    #[test]
    fn schedules() {
        let (h, e) = schedule_eval(&BandwidthSchedule::power_law(), 1000.0, hurst()).unwrap();
        assert!((h - 0.501_187_233_6).abs() < 1e-9);
        assert!((e - 0.251_188_643_2).abs() < 1e-9);
        let (h2, _) = schedule_eval(&BandwidthSchedule::power_law(), 2000.0, hurst()).unwrap();
        assert!(h2 < h);
        assert!(schedule_eval(&BandwidthSchedule::power_law(), 1.0, hurst()).is_err());
        let fixed = BandwidthSchedule::new("fixed:0.3".parse().unwrap(), "fixed:0.01".parse().unwrap());
        assert_eq!(schedule_eval(&fixed, 0.5, hurst()).unwrap(), (0.3, 0.01));
        assert!("fixed:-1".parse::<BandwidthRule>().is_err());
        assert!("fixed:".parse::<EpsilonRule>().is_err());
        assert!("cubic".parse::<EpsilonRule>().is_err());
        assert_eq!("power".parse::<BandwidthRule>().unwrap().to_string(), "power");
    }

    #[test]
    fn density_of_constant_and_distant_paths() {
        let g = TimeGrid::new(10.0, 100).unwrap();
        let k = Kernel::biweight();
        let c = Path::new(g, vec![0.3; 101]).unwrap();
        assert!((density_estimate(&c, 0.3, 0.2, &k).unwrap() - k.value(0.0) / 0.2).abs() < 1e-12);
        assert_eq!(density_estimate(&c, 5.0, 0.2, &k).unwrap(), 0.0);
        assert!(density_estimate(&c, 0.3, 0.0, &k).is_err());
        let p = pathwise_estimate(&c, 5.0, 0.2, &k).unwrap();
        assert!(p.degenerate && p.riemann.is_nan());
    }

    fn tanh_pair(seed: u64, eps: f64) -> (SdeConfig, CoupledPaths) {
        let cfg = SdeConfig::new(
            DriftModel::tanh_dissipative(1.0, 1.0).unwrap(),
            1.0,
            0.3,
            TimeGrid::new(40.0, 800).unwrap(),
            hurst(),
        )
        .unwrap();
        let noise = sample_fgn_fft(0.7, cfg.grid, SeedSpec::new(seed, 0)).unwrap();
        let cp = solve_coupled(&cfg, eps, &noise).unwrap();
        (cfg, cp)
    }

    #[test]
    fn pathwise_routes_and_bound() {
        // Relaxation from x0 = 4 through the window around x = 2.
        let k = Kernel::biweight();
        let (x, h) = (2.0, 1.0);
        let diff = |n| {
            let cfg = SdeConfig::new(
                DriftModel::linear(1.0).unwrap(),
                0.2,
                4.0,
                TimeGrid::new(4.0, n).unwrap(),
                hurst(),
            )
            .unwrap();
            let noise = sample_fgn_fft(0.7, cfg.grid, SeedSpec::new(8, 0)).unwrap();
            let path = crate::sde::solve_euler(&cfg, &noise).unwrap();
            let p = pathwise_estimate(&path, x, h, &k).unwrap();
            assert!(!p.degenerate);
            let bound = k.sup() * (path.last() - path.first()).abs() / (4.0 * h * p.f_hat);
            assert!(p.closed_form.abs() <= bound);
            ((p.riemann - p.closed_form) / p.closed_form).abs()
        };
        let coarse = diff(400);
        assert!(coarse < 0.05, "{coarse}");
        assert!(diff(3200) < coarse);
    }

    #[test]
    fn decomposition_reproduces_estimate() {
        let (cfg, cp) = tanh_pair(9, 0.01);
        let k = Kernel::biweight();
        let spec = CorrectionSpec::new(hurst(), cfg.sigma, RatioMode::Coupled);
        let est = DriftEstimator::new(RatioSource::Coupled(&cp), spec).unwrap();
        for x in [-0.5, 0.0, 0.4] {
            let d = est.decomposition(x, 0.5, &k, &cfg.drift).unwrap();
            let e = est.estimate(x, 0.5, &k).unwrap();
            assert_eq!(d.estimate, e.estimate);
            let lhs = e.estimate - cfg.drift.value(x);
            let rhs = (d.bias + d.stochastic) / d.f_hat;
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1e-3), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn grid_output_shapes_and_flags() {
        let (cfg, cp) = tanh_pair(4, 0.01);
        let k = Kernel::cosine();
        let xs = [-0.5, 0.5, 50.0];
        let out = estimate_grid(&cp, cfg.sigma, hurst(), &xs, 0.4, &k).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.degenerate_mask, vec![false, false, true]);
        assert!(out.b_hat_eps[2].is_nan());
        assert!(out.f_hat.iter().all(|f| *f >= 0.0));
        for i in 0..2 {
            assert!((out.b_tilde[i] - out.b_hat_eps[i] - out.correction[i]).abs() < 1e-12);
        }
        let grid = default_x_grid(cp.base.values(), &[2.0]);
        assert_eq!(grid.len(), 10);
        assert!(grid.windows(2).take(8).all(|w| w[0] <= w[1]));
    }
}
