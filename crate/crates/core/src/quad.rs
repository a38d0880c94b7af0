//! Adaptive Gauss-Kronrod (7/15) quadrature on finite intervals.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_DEPTH: u32 = 48;

fn kronrod(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let dx = r * XGK[i];
        let s = f(c - dx) + f(c + dx);
        k += WGK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    (k * r, ((k - g) * r).abs())
}

/// Integrates `f` over `[a, b]` to absolute tolerance `abs_tol` or relative
/// tolerance `rel_tol`, whichever is looser.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let (whole, err) = kronrod(&f, a, b);
    let mut stack = vec![(a, b, whole, err, 0u32)];
    let mut total = 0.0;
    let mut total_err = 0.0;
    let target = abs_tol.max(rel_tol * whole.abs());
    while let Some((lo, hi, value, err, depth)) = stack.pop() {
        let share = target * (hi - lo) / (b - a);
        if err <= share.max(f64::EPSILON * value.abs()) || depth >= MAX_DEPTH {
            total += value;
            total_err += err;
            continue;
        }
        let mid = 0.5 * (lo + hi);
        let (l, el) = kronrod(&f, lo, mid);
        let (r, er) = kronrod(&f, mid, hi);
        stack.push((lo, mid, l, el, depth + 1));
        stack.push((mid, hi, r, er, depth + 1));
    }
    if !total.is_finite() || total_err > 10.0 * target.max(f64::EPSILON * total.abs()) {
        return Err(Error::Quadrature {
            lo: a,
            hi: b,
            estimate: total_err,
        });
    }
    Ok(total)
}
