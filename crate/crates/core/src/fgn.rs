//! Exact fractional Brownian motion sampling on uniform grids.
//!
//! Two generators share one law: [`FgnCholesky`] factors the path covariance
//! directly (O(n^3), kept as an oracle) and [`FgnFft`] draws stationary
//! fractional Gaussian noise through the Davies-Harte circulant embedding
//! (O(n log n)) and prefix-sums it into a path.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Path, SeedSpec, TimeGrid};

/// Largest grid accepted by the Cholesky oracle.
pub const CHOLESKY_MAX_STEPS: usize = 4096;

/// Relative threshold below which negative circulant eigenvalues are treated as round-off.
pub const EIGENVALUE_TOLERANCE: f64 = 1e-12;

/// Hurst index of the driving noise, restricted to `(1/2, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct HurstIndex(f64);

impl HurstIndex {
    pub fn new(value: f64) -> Result<Self> {
        if !(value > 0.5 && value < 1.0) {
            return Err(Error::param(
                "hurst",
                format!("must lie in the open interval (0.5, 1), got {value}"),
            ));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `H (2H - 1)`.
    pub fn alpha(self) -> f64 {
        self.0 * (2.0 * self.0 - 1.0)
    }
}

impl TryFrom<f64> for HurstIndex {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<HurstIndex> for f64 {
    fn from(h: HurstIndex) -> f64 {
        h.0
    }
}

/// Generators accept any exponent in `(0, 1)`, so the Brownian case can be
/// used as a sanity reference even though the estimators need `H > 1/2`.
fn check_exponent(hurst: f64) -> Result<()> {
    if !(hurst > 0.0 && hurst < 1.0) {
        return Err(Error::param(
            "hurst",
            format!("generator exponent must lie in (0, 1), got {hurst}"),
        ));
    }
    Ok(())
}

/// `Cov(B(s), B(t)) = (s^2H + t^2H - |t - s|^2H) / 2`.
pub fn fbm_covariance(hurst: f64, s: f64, t: f64) -> Result<f64> {
    check_exponent(hurst)?;
    if !(s >= 0.0 && t >= 0.0) {
        return Err(Error::param("time", format!("covariance needs s, t >= 0, got ({s}, {t})")));
    }
    let p = 2.0 * hurst;
    Ok(0.5 * (s.powf(p) + t.powf(p) - (t - s).abs().powf(p)))
}

/// Autocovariance of unit-step fractional Gaussian noise at lag `k`.
pub fn fgn_autocovariance(hurst: f64, k: usize) -> f64 {
    let p = 2.0 * hurst;
    if k == 0 {
        return 1.0;
    }
    let k = k as f64;
    0.5 * ((k + 1.0).powf(p) + (k - 1.0).powf(p) - 2.0 * k.powf(p))
}

fn path_from_increments(grid: TimeGrid, increments: impl Iterator<Item = f64>) -> Result<Path> {
    let mut values = Vec::with_capacity(grid.steps() + 1);
    let mut acc = 0.0;
    values.push(acc);
    for dx in increments {
        acc += dx;
        values.push(acc);
    }
    Path::new(grid, values)
}

/// Packed lower Cholesky factor of the `n x n` symmetric matrix `entry(i, j)`.
fn packed_cholesky(n: usize, entry: impl Fn(usize, usize) -> Result<f64>) -> Result<Vec<f64>> {
    let row = |i: usize| i * (i + 1) / 2;
    let mut lower = vec![0.0; row(n)];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = entry(i, j)?;
            let (ri, rj) = (row(i), row(j));
            for k in 0..j {
                sum -= lower[ri + k] * lower[rj + k];
            }
            if i == j {
                if !(sum > 0.0) {
                    return Err(Error::NotPositiveDefinite {
                        minor: i + 1,
                        pivot: sum,
                    });
                }
                lower[ri + i] = sum.sqrt();
            } else {
                lower[ri + j] = sum / lower[rj + j];
            }
        }
    }
    Ok(lower)
}

/// Cholesky factor of the fBm covariance at `t_1..t_n` (the origin is pinned at 0).
#[derive(Debug, Clone)]
pub struct FgnCholesky {
    grid: TimeGrid,
    // Row-major lower triangle, row i holds i + 1 entries.
    lower: Vec<f64>,
}

impl FgnCholesky {
    pub fn new(hurst: f64, grid: TimeGrid) -> Result<Self> {
        check_exponent(hurst)?;
        let n = grid.steps();
        if n > CHOLESKY_MAX_STEPS {
            return Err(Error::param(
                "steps",
                format!("Cholesky sampler supports at most {CHOLESKY_MAX_STEPS} steps, got {n}"),
            ));
        }
        let lower = packed_cholesky(n, |i, j| fbm_covariance(hurst, grid.time(i + 1), grid.time(j + 1)))?;
        Ok(Self { grid, lower })
    }

    pub fn sample(&self, seed: SeedSpec) -> Result<Path> {
        let n = self.grid.steps();
        let mut rng = seed.rng();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut values = Vec::with_capacity(n + 1);
        values.push(0.0);
        let mut start = 0;
        for i in 0..n {
            let row = &self.lower[start..start + i + 1];
            values.push(row.iter().zip(&z).map(|(l, z)| l * z).sum());
            start += i + 1;
        }
        Path::new(self.grid, values)
    }
}

/// Exact O(n^3) sampler used as the reference law.
pub fn sample_fgn_cholesky(hurst: f64, grid: TimeGrid, seed: SeedSpec) -> Result<Path> {
    FgnCholesky::new(hurst, grid)?.sample(seed)
}

/// Davies-Harte generator with cached circulant spectrum.
///
/// Reuse one instance across replications on the same grid: the spectrum
/// and FFT plan are computed once.
#[derive(Clone)]
pub struct FgnFft {
    grid: TimeGrid,
    hurst: f64,
    // sqrt(lambda_k / m) for the 2n-point embedding.
    amplitudes: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FgnFft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FgnFft")
            .field("grid", &self.grid)
            .field("hurst", &self.hurst)
            .finish_non_exhaustive()
    }
}

impl FgnFft {
    pub fn new(hurst: f64, grid: TimeGrid) -> Result<Self> {
        check_exponent(hurst)?;
        let n = grid.steps();
        let m = 2 * n;
        let mut row: Vec<Complex<f64>> = (0..m)
            .map(|k| {
                let lag = if k <= n { k } else { m - k };
                Complex::new(fgn_autocovariance(hurst, lag), 0.0)
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(m);
        fft.process(&mut row);

        let max = row.iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max);
        let tolerance = EIGENVALUE_TOLERANCE * max;
        let mut amplitudes = Vec::with_capacity(m);
        for (index, c) in row.iter().enumerate() {
            let value = c.re;
            if value < -tolerance {
                return Err(Error::NegativeEigenvalue {
                    index,
                    value,
                    tolerance,
                });
            }
            amplitudes.push((value.max(0.0) / m as f64).sqrt());
        }
        Ok(Self {
            grid,
            hurst,
            amplitudes,
            fft,
        })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    /// `n` fractional Gaussian noise increments scaled to the grid step.
    pub fn sample_increments<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.grid.steps();
        let mut buf: Vec<Complex<f64>> = self
            .amplitudes
            .iter()
            .map(|&a| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex::new(a * re, a * im)
            })
            .collect();
        self.fft.process(&mut buf);
        let scale = self.grid.step().powf(self.hurst);
        buf[..n].iter().map(|c| c.re * scale).collect()
    }

    pub fn sample(&self, seed: SeedSpec) -> Result<Path> {
        let mut rng = seed.rng();
        let inc = self.sample_increments(&mut rng);
        path_from_increments(self.grid, inc.into_iter())
    }
}

/// Fast exact sampler (Davies-Harte circulant embedding).
pub fn sample_fgn_fft(hurst: f64, grid: TimeGrid, seed: SeedSpec) -> Result<Path> {
    FgnFft::new(hurst, grid)?.sample(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FbmMethod {
    Fft,
    Cholesky,
}

impl std::str::FromStr for FbmMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fft" => Ok(Self::Fft),
            "cholesky" => Ok(Self::Cholesky),
            other => Err(Error::param("method", format!("expected fft|cholesky, got `{other}`"))),
        }
    }
}

pub fn sample_fbm(method: FbmMethod, hurst: f64, grid: TimeGrid, seed: SeedSpec) -> Result<Path> {
    match method {
        FbmMethod::Fft => sample_fgn_fft(hurst, grid, seed),
        FbmMethod::Cholesky => sample_fgn_cholesky(hurst, grid, seed),
    }
}
