use fsde_core::fgn::{sample_fgn_fft, HurstIndex};
use fsde_core::grid::{SeedSpec, TimeGrid};
use fsde_core::sde::*;
use fsde_core::stats;
use proptest::prelude::*;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use statrs::function::gamma::gamma;

fn hurst(h: f64) -> HurstIndex {
    HurstIndex::new(h).unwrap()
}

#[test]
fn euler_tracks_exact_linear_recursion_on_average() {
    // X_{i+1} = X_i e^{-step} + sigma (B_{i+1} - B_i) as the oracle.
    let hu = hurst(0.7);
    let errs: Vec<f64> = [0.02, 0.01]
        .iter()
        .map(|&dt| {
            let grid = TimeGrid::with_step(5.0, dt).unwrap();
            let cfg = SdeConfig::new(DriftModel::linear(1.0).unwrap(), 1.0, 1.0, grid, hu).unwrap();
            let e: Vec<f64> = (0..200u64)
                .map(|r| {
                    let noise = sample_fgn_fft(0.7, grid, SeedSpec::new(1, r)).unwrap();
                    let x = solve_euler(&cfg, &noise).unwrap();
                    let mut y = 1.0;
                    let mut worst: f64 = 0.0;
                    for (i, db) in noise.increments().enumerate() {
                        y = y * (-dt).exp() + db;
                        worst = worst.max((y - x.values()[i + 1]).abs());
                    }
                    worst
                })
                .collect();
            stats::mean(&e)
        })
        .collect();
    assert!(errs[0] < 0.05, "{errs:?}");
    assert!(errs[1] < errs[0]);
}

#[test]
fn contraction_holds_for_each_catalog_model() {
    let grid = TimeGrid::with_step(5.0, 0.005).unwrap();
    let models = [
        DriftModel::linear(1.0).unwrap(),
        DriftModel::linear(3.0).unwrap(),
        DriftModel::tanh_dissipative(1.0, 1.0).unwrap(),
        DriftModel::tanh_dissipative(0.5, 2.0).unwrap(),
    ];
    for drift in models {
        let cfg = SdeConfig::new(drift, 1.0, 0.0, grid, hurst(0.7)).unwrap();
        let m = cfg.drift.dissipativity();
        let slack = 1.0 + cfg.contraction_slack();
        let sampler = StationarySampler::new(cfg.clone(), 20.0 / m).unwrap();
        let bad: usize = (0..100u64)
            .into_par_iter()
            .map(|r| {
                let cp = sampler.sample(SeedSpec::new(2, r)).unwrap().coupled(&cfg, 0.01).unwrap();
                cp.base
                    .values()
                    .iter()
                    .zip(cp.shifted.values())
                    .zip(grid.times())
                    .filter(|((b, s), t)| {
                        let d = *s - *b;
                        !(d > 0.0 && d <= 0.01 * (-m * t).exp() * slack)
                    })
                    .count()
            })
            .sum();
        assert_eq!(bad, 0, "{}", cfg.drift.name());
    }
}

#[test]
fn stationary_fou_variance_and_mean() {
    // Stationary variance of the fractional OU process: sigma^2 Gamma(2H + 1) / (2 lambda^2H).
    let (h, t) = (0.7, 1000.0);
    let grid = TimeGrid::with_step(t, 0.02).unwrap();
    let paths: Vec<Vec<f64>> = (0..20u64)
        .into_par_iter()
        .map(|r| {
            stationary_ou_path(1.0, 1.0, grid, hurst(h), SeedSpec::new(3, r), Some(20.0))
                .unwrap()
                .into_values()
        })
        .collect();
    let exact = gamma(2.0 * h + 1.0) / 2.0;
    let var = stats::mean(&paths.iter().map(|p| stats::variance(p)).collect::<Vec<_>>());
    assert!((var - exact).abs() <= 0.10 * exact, "{var} vs {exact}");
    let means: Vec<f64> = paths.iter().map(|p| stats::mean(p)).collect();
    assert!(stats::mean(&means).abs() <= 4.0 * stats::std_error(&means));
}

#[test]
fn autocorrelation_decays_with_long_memory_exponent() {
    let (h, dt, t) = (0.7, 0.1, 4000.0);
    let grid = TimeGrid::with_step(t, dt).unwrap();
    let n = grid.steps() + 1;
    let lags: Vec<usize> = [10.0, 20.0, 40.0, 70.0, 100.0].iter().map(|l| (l / dt) as usize).collect();
    // Autocovariance with the known zero mean, by FFT, averaged over paths.
    let acov: Vec<Vec<f64>> = (0..40u64)
        .into_par_iter()
        .map(|r| {
            let p = stationary_ou_path(1.0, 1.0, grid, hurst(h), SeedSpec::new(4, r), Some(20.0)).unwrap();
            let m = (2 * n).next_power_of_two();
            let mut buf: Vec<Complex<f64>> = p.values().iter().map(|&v| Complex::new(v, 0.0)).collect();
            buf.resize(m, Complex::new(0.0, 0.0));
            let mut planner = FftPlanner::new();
            planner.plan_fft_forward(m).process(&mut buf);
            for c in buf.iter_mut() {
                *c = Complex::new(c.norm_sqr(), 0.0);
            }
            planner.plan_fft_inverse(m).process(&mut buf);
            std::iter::once(0)
                .chain(lags.iter().copied())
                .map(|k| buf[k].re / (m * (n - k)) as f64)
                .collect()
        })
        .collect();
    let avg = |j: usize| stats::mean(&acov.iter().map(|a| a[j]).collect::<Vec<_>>());
    let pts: Vec<(f64, f64)> = lags
        .iter()
        .enumerate()
        .map(|(j, &k)| (k as f64 * dt, avg(j + 1) / avg(0)))
        .collect();
    let fit = stats::fit_rate(&pts).unwrap();
    assert!((fit.slope - (2.0 * h - 2.0)).abs() <= 0.15, "{pts:?} slope {}", fit.slope);
}

#[test]
fn moments_stay_bounded_over_time() {
    let sampler = |t: f64| {
        let grid = TimeGrid::with_step(t, 0.05).unwrap();
        let cfg = SdeConfig::new(DriftModel::tanh_dissipative(1.0, 1.0).unwrap(), 1.0, 3.0, grid, hurst(0.7)).unwrap();
        let p = solve_euler(&cfg, &sample_fgn_fft(0.7, grid, SeedSpec::new(5, t as u64)).unwrap()).unwrap();
        let v = p.values();
        stats::mean(&v[v.len() / 2..].iter().map(|x| x.abs()).collect::<Vec<_>>())
    };
    let ratio = sampler(2000.0) / sampler(500.0);
    assert!((0.5..=2.0).contains(&ratio), "{ratio}");
}

#[test]
fn tiny_offset_keeps_paths_close() {
    let grid = TimeGrid::with_step(10.0, 0.01).unwrap();
    let cfg = SdeConfig::new(DriftModel::tanh_dissipative(1.0, 1.0).unwrap(), 1.0, 0.2, grid, hurst(0.8)).unwrap();
    let noise = sample_fgn_fft(0.8, grid, SeedSpec::new(6, 0)).unwrap();
    let cp = solve_coupled(&cfg, 1e-8, &noise).unwrap();
    let worst = cp
        .base
        .values()
        .iter()
        .zip(cp.shifted.values())
        .map(|(b, s)| (s - b).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn coupled_paths_stay_ordered(
        seed in 0u64..1000,
        eps in 1e-6f64..1.0,
        x0 in -5.0f64..5.0,
        a in 0.0f64..3.0,
        h in 0.55f64..0.95,
    ) {
        let grid = TimeGrid::with_step(20.0, 0.02).unwrap();
        let drift = DriftModel::tanh_dissipative(1.0, a).unwrap();
        let cfg = SdeConfig::new(drift, 1.0, x0, grid, hurst(h)).unwrap();
        let noise = sample_fgn_fft(h, grid, SeedSpec::new(seed, 0)).unwrap();
        let cp = solve_coupled(&cfg, eps, &noise).unwrap();
        let log_gaps = cp.log_gaps();
        for ((b, s), lg) in cp.base.values().iter().zip(cp.shifted.values()).zip(&log_gaps) {
            prop_assert!(s >= b);
            prop_assert!(lg.is_finite());
        }
        // Rebuilding from the recorded log gaps reproduces the growth factors.
        let again = CoupledPaths::from_log_gaps(cp.base.clone(), cp.shifted.clone(), &log_gaps).unwrap();
        for (g1, g2) in cp.growth_factors().iter().zip(again.growth_factors()) {
            prop_assert!((g1 - g2).abs() <= 1e-12);
        }
    }
}
