//! Hermite expansions of kernel functionals of a standard Gaussian, Mehler's
//! formula, and autocorrelation diagnostics for stationary paths.

use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::Kernel;
use crate::grid::SeedSpec;
use crate::quad;

/// Highest degree accepted by [`hermite_poly`].
pub const MAX_HERMITE_DEGREE: usize = 50;

/// Default truncation degree. The Parseval series of a kernel functional
/// converges slowly, so use [`HermiteCoeffs::second_moment`] for the full sum.
pub const DEFAULT_Q_MAX: usize = 12;

/// Standard normal density.
pub fn normal_density(y: f64) -> f64 {
    (-0.5 * y * y).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn check_degree(q: usize) -> Result<()> {
    if q > MAX_HERMITE_DEGREE {
        return Err(Error::param(
            "q",
            format!("degree {q} exceeds {MAX_HERMITE_DEGREE}"),
        ));
    }
    Ok(())
}

/// Probabilists' Hermite polynomial `H_q(y)`.
pub fn hermite_poly(q: usize, y: f64) -> Result<f64> {
    check_degree(q)?;
    Ok(*hermite_values(q, y).last().expect("at least H_0"))
}

/// `[H_0(y), ..., H_q(y)]` by the three-term recurrence.
fn hermite_values(q: usize, y: f64) -> Vec<f64> {
    let mut h = Vec::with_capacity(q + 1);
    h.push(1.0);
    if q >= 1 {
        h.push(y);
    }
    for k in 1..q {
        let next = y * h[k] - k as f64 * h[k - 1];
        h.push(next);
    }
    h
}

fn factorial(q: usize) -> f64 {
    (1..=q).map(|k| k as f64).product()
}

/// Hermite coefficients `J[q] = E[G(U) H_q(U)]` of a centered functional `G`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HermiteCoeffs {
    pub q_max: usize,
    pub j: Vec<f64>,
    /// First `q >= 1` with a coefficient above the zero tolerance.
    pub rank: Option<usize>,
    /// `E[G(U)^2]`.
    pub second_moment: f64,
}

impl HermiteCoeffs {
    /// `sum_{1 <= q <= k} J[q]^2 / q!` for `k = 1..=q_max`.
    pub fn parseval_partial_sums(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.j[1..]
            .iter()
            .enumerate()
            .map(|(i, jq)| {
                acc += jq * jq / factorial(i + 1);
                acc
            })
            .collect()
    }
}

fn check_scales(h: f64, sigma0: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::param("h", format!("must be positive, got {h}")));
    }
    if !(sigma0 > 0.0 && sigma0.is_finite()) {
        return Err(Error::param("sigma0", format!("must be positive, got {sigma0}")));
    }
    Ok(())
}

fn support(h: f64, x: f64, sigma0: f64) -> (f64, f64) {
    ((x - h) / sigma0, (x + h) / sigma0)
}

fn integrate_on_support(f: impl Fn(f64) -> f64, h: f64, x: f64, sigma0: f64) -> Result<f64> {
    let (lo, hi) = support(h, x, sigma0);
    quad::integrate(f, lo, hi, 1e-15, 1e-12)
}

/// `R = int K_h(sigma0 y - x) nu(y) dy`, the kernel-smoothed density of
/// `sigma0 U` at `x`; tends to `nu(x / sigma0) / sigma0` as `h -> 0`.
pub fn convolved_density(kernel: &Kernel, h: f64, x: f64, sigma0: f64) -> Result<f64> {
    check_scales(h, sigma0)?;
    integrate_on_support(|y| kernel.scaled(sigma0 * y - x, h) * normal_density(y), h, x, sigma0)
}

/// Coefficients of `G(y) = K_h(sigma0 y - x) - R`.
///
/// `G` is constant (`-R`) off the kernel support and `E[H_q] = 0` for
/// `q >= 1`, so every coefficient reduces to an integral over the support.
pub fn hermite_coeffs_of_kernel_functional(
    kernel: &Kernel,
    h: f64,
    x: f64,
    sigma0: f64,
    q_max: usize,
) -> Result<HermiteCoeffs> {
    check_scales(h, sigma0)?;
    check_degree(q_max)?;
    if q_max == 0 {
        return Err(Error::param("q_max", "must be at least 1"));
    }
    let kh = |y: f64| kernel.scaled(sigma0 * y - x, h);
    let r = convolved_density(kernel, h, x, sigma0)?;
    let mut j = Vec::with_capacity(q_max + 1);
    j.push(integrate_on_support(|y| kh(y) * normal_density(y), h, x, sigma0)? - r);
    for q in 1..=q_max {
        let v = integrate_on_support(
            |y| kh(y) * hermite_values(q, y)[q] * normal_density(y),
            h,
            x,
            sigma0,
        )?;
        j.push(v);
    }
    let second_moment = integrate_on_support(|y| kh(y).powi(2) * normal_density(y), h, x, sigma0)? - r * r;
    let norm = second_moment.max(0.0).sqrt();
    let rank = (1..=q_max).find(|&q| j[q].abs() >= 1e-9 * factorial(q).sqrt() * norm);
    Ok(HermiteCoeffs {
        q_max,
        j,
        rank,
        second_moment,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MehlerCheck {
    pub empirical: f64,
    pub predicted: f64,
    pub stderr: f64,
}

impl MehlerCheck {
    pub fn within(&self, k: f64) -> bool {
        (self.empirical - self.predicted).abs() <= k * self.stderr
    }
}

/// Monte Carlo estimate of `E[H_q(U) H_q(V)]` for standard normals with
/// correlation `rho`, against `q! rho^q`.
pub fn mehler_check(q: usize, rho: f64, samples: usize, seed: SeedSpec) -> Result<MehlerCheck> {
    check_degree(q)?;
    if !(rho.abs() <= 1.0) {
        return Err(Error::param("rho", format!("must lie in [-1, 1], got {rho}")));
    }
    if samples < 2 {
        return Err(Error::param("samples", "need at least 2"));
    }
    let mut rng = seed.rng();
    let c = (1.0 - rho * rho).sqrt();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let u: f64 = StandardNormal.sample(&mut rng);
        let z: f64 = StandardNormal.sample(&mut rng);
        let v = rho * u + c * z;
        let p = hermite_values(q, u)[q] * hermite_values(q, v)[q];
        sum += p;
        sum_sq += p * p;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq - n * mean * mean) / (n - 1.0);
    Ok(MehlerCheck {
        empirical: mean,
        predicted: factorial(q) * rho.powi(q as i32),
        stderr: (var.max(0.0) / n).sqrt(),
    })
}

/// Biased (`1/n`) sample autocorrelation at lags `0..=max_lag`, by FFT.
pub fn empirical_autocorrelation(values: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = values.len();
    if n < 2 || max_lag >= n {
        return Err(Error::param(
            "max_lag",
            format!("need max_lag < len = {n} and at least 2 values"),
        ));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = values
        .iter()
        .map(|v| Complex::new(v - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    let c0 = buf[0].re;
    if !(c0 > 0.0) {
        return Err(Error::param("values", "constant series has no autocorrelation"));
    }
    Ok(buf[..=max_lag].iter().map(|c| c.re / c0).collect())
}

/// `int_0^T int_0^T |rho(v - u)| du dv` on the grid of step `step`.
pub fn autocorr_double_integral(rho_hat: &[f64], horizon: f64, step: f64) -> Result<f64> {
    if !(step > 0.0 && horizon > 0.0) {
        return Err(Error::param("step", "horizon and step must be positive"));
    }
    let n = (horizon / step).round() as usize;
    if rho_hat.len() < n {
        return Err(Error::param(
            "rho_hat",
            format!("{} lags given, grid needs {n}", rho_hat.len()),
        ));
    }
    if (rho_hat[0] - 1.0).abs() > 1e-12 {
        return Err(Error::param("rho_hat", format!("lag 0 must be 1, got {}", rho_hat[0])));
    }
    let s: f64 = rho_hat[..n]
        .iter()
        .enumerate()
        .map(|(k, r)| (n - k) as f64 * r.abs())
        .sum();
    Ok(step * step * (2.0 * s - n as f64))
}
