//! Uniform time grids, sampled paths and seeded noise streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid `t_i = i * step` for `i = 0..=n` on `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::param("horizon", format!("must be finite and > 0, got {horizon}")));
        }
        if n < 2 {
            return Err(Error::param("steps", format!("need at least 2 steps, got {n}")));
        }
        Ok(Self { horizon, n })
    }

    /// Grid with the given step; `horizon / step` must be an integer up to 1e-9 relative.
    pub fn with_step(horizon: f64, step: f64) -> Result<Self> {
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::param("step", format!("must be finite and > 0, got {step}")));
        }
        let ratio = horizon / step;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::param(
                "step",
                format!("horizon {horizon} is not an integer multiple of step {step}"),
            ));
        }
        Self::new(horizon, n as usize)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of steps; the grid has `n + 1` points.
    pub fn steps(&self) -> usize {
        self.n
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.n as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.step()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        let dt = self.step();
        (0..=self.n).map(move |i| i as f64 * dt)
    }
}

/// Values of a process at every point of a [`TimeGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl Path {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.steps() + 1 {
            return Err(Error::GridMismatch(format!(
                "path has {} values but grid has {} points",
                values.len(),
                grid.steps() + 1
            )));
        }
        if let Some(step) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step });
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn first(&self) -> f64 {
        self.values[0]
    }

    pub fn last(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// Increments `values[i + 1] - values[i]`, `n` of them.
    pub fn increments(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.windows(2).map(|w| w[1] - w[0])
    }

    /// Applies `f` pointwise, keeping the grid.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Path> {
        Path::new(self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn ensure_same_grid(&self, other: &Path) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch(format!(
                "grids differ: (T={}, n={}) vs (T={}, n={})",
                self.grid.horizon,
                self.grid.n,
                other.grid.horizon,
                other.grid.n
            )));
        }
        Ok(())
    }
}

/// `(base_seed, stream_id)` fully determines a noise realization.
///
/// Monte Carlo replication `r` uses `stream_id = r`, so sweeps do not depend
/// on scheduling order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub base_seed: u64,
    pub stream_id: u64,
}

impl SeedSpec {
    pub fn new(base_seed: u64, stream_id: u64) -> Self {
        Self {
            base_seed,
            stream_id,
        }
    }

    pub fn with_stream(self, stream_id: u64) -> Self {
        Self { stream_id, ..self }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}
