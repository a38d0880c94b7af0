use fsde_core::estimators::*;
use fsde_core::fgn::{sample_fgn_fft, HurstIndex};
use fsde_core::gaussdiag::convolved_density;
use fsde_core::grid::{Path, SeedSpec, TimeGrid};
use fsde_core::integrals::{CorrectionSpec, RatioMode, RatioSource};
use fsde_core::sde::*;
use fsde_core::stats;
use proptest::prelude::*;
use rayon::prelude::*;

fn hurst() -> HurstIndex {
    HurstIndex::new(0.7).unwrap()
}

fn ou_sampler(t: f64) -> (SdeConfig, StationarySampler) {
    let grid = TimeGrid::with_step(t, 0.05).unwrap();
    let cfg = SdeConfig::new(DriftModel::linear(1.0).unwrap(), 1.0, 0.0, grid, hurst()).unwrap();
    let s = StationarySampler::new(cfg.clone(), 20.0).unwrap();
    (cfg, s)
}

#[test]
fn density_mean_matches_smoothed_stationary_law() {
    // Under stationarity E f^(x) is the kernel-smoothed stationary density.
    let k = Kernel::cosine();
    let (_, sampler) = ou_sampler(400.0);
    let paths: Vec<Path> = (0..100u64)
        .into_par_iter()
        .map(|r| sampler.sample(SeedSpec::new(1, r)).unwrap().path)
        .collect();
    let s0 = stats::mean(&paths.iter().map(|p| stats::variance(p.values())).collect::<Vec<_>>()).sqrt();
    let h = 0.4;
    for x in [-1.0, 0.0, 0.8] {
        let f: Vec<f64> = paths.iter().map(|p| density_estimate(p, x, h, &k).unwrap()).collect();
        let target = convolved_density(&k, h, x, s0).unwrap();
        let err = (stats::mean(&f) - target).abs();
        assert!(err <= 4.0 * stats::std_error(&f) + 0.01 * target, "x={x}: {err}");
    }
}

#[test]
fn corrected_estimate_recovers_ou_drift() {
    let k = Kernel::biweight();
    let (cfg, sampler) = ou_sampler(200.0);
    let (h, eps) = schedule_eval(&BandwidthSchedule::power_law(), 200.0, hurst()).unwrap();
    let xs = [-0.5, 0.5];
    let outs: Vec<EstimatorOutput> = (0..60u64)
        .into_par_iter()
        .map(|r| {
            let cp = sampler.sample(SeedSpec::new(2, r)).unwrap().coupled(&cfg, eps).unwrap();
            estimate_grid(&cp, 1.0, hurst(), &xs, h, &k).unwrap()
        })
        .collect();
    for (j, &x) in xs.iter().enumerate() {
        let v: Vec<f64> = outs.iter().filter(|o| !o.degenerate_mask[j]).map(|o| o.b_hat_eps[j]).collect();
        let tilde: Vec<f64> = outs.iter().filter(|o| !o.degenerate_mask[j]).map(|o| o.b_tilde[j]).collect();
        let err = (stats::mean(&v) + x).abs();
        assert!(err <= h + 3.0 * stats::std_error(&v), "x={x}: {err}");
        // Without the correction the estimate sits near zero.
        assert!(stats::mean(&tilde).abs() < 0.5 * x.abs());
    }
}

#[test]
fn linear_estimate_does_not_depend_on_offset() {
    let k = Kernel::biweight();
    let (cfg, sampler) = ou_sampler(100.0);
    let s = sampler.sample(SeedSpec::new(3, 0)).unwrap();
    let xs = [-1.0, -0.3, 0.4, 1.2];
    let reference = estimate_grid(&s.coupled(&cfg, 0.1).unwrap(), 1.0, hurst(), &xs, 0.6, &k).unwrap();
    for eps in [1e-2, 1e-4, 1e-7] {
        let out = estimate_grid(&s.coupled(&cfg, eps).unwrap(), 1.0, hurst(), &xs, 0.6, &k).unwrap();
        for (a, b) in out.b_hat_eps.iter().zip(&reference.b_hat_eps) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "eps {eps}: {a} vs {b}");
        }
    }
}

#[test]
fn bias_term_is_bounded_by_lipschitz_times_bandwidth() {
    let k = Kernel::biweight();
    let drift = DriftModel::tanh_dissipative(1.0, 1.0).unwrap();
    let grid = TimeGrid::with_step(100.0, 0.05).unwrap();
    let cfg = SdeConfig::new(drift.clone(), 1.0, 0.0, grid, hurst()).unwrap();
    let s = StationarySampler::new(cfg, 20.0).unwrap().sample(SeedSpec::new(4, 0)).unwrap();
    let spec = CorrectionSpec::new(hurst(), 1.0, RatioMode::Derivative);
    let est = DriftEstimator::new(RatioSource::Model { drift: &drift, path: &s.path }, spec).unwrap();
    for x in [-0.8, -0.2, 0.3, 0.9] {
        for h in [0.2, 0.5, 1.0] {
            let d = est.decomposition(x, h, &k, &drift).unwrap();
            assert!(d.bias.abs() / d.f_hat <= drift.lip_norm() * h * (1.0 + 1e-12));
            let e = est.estimate(x, h, &k).unwrap();
            assert!((e.estimate - (drift.value(x) + (d.bias + d.stochastic) / d.f_hat)).abs() <= 1e-9);
        }
    }
}

#[test]
fn larger_bandwidth_lowers_stochastic_variance() {
    let k = Kernel::biweight();
    let (cfg, sampler) = ou_sampler(200.0);
    let var = |h: f64| {
        let v: Vec<f64> = (0..100u64)
            .into_par_iter()
            .map(|r| {
                let s = sampler.sample(SeedSpec::new(5, r)).unwrap();
                let spec = CorrectionSpec::new(hurst(), 1.0, RatioMode::Derivative);
                let est = DriftEstimator::new(RatioSource::Model { drift: &cfg.drift, path: &s.path }, spec).unwrap();
                est.decomposition(0.5, h, &k, &cfg.drift).unwrap().stochastic
            })
            .collect();
        stats::variance(&v)
    };
    assert!(var(0.8) < var(0.4));
}

fn path_from(values: &[f64], horizon: f64) -> Path {
    Path::new(TimeGrid::new(horizon, values.len() - 1).unwrap(), values.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn density_is_nonnegative_and_translation_equivariant(
        values in prop::collection::vec(-3.0f64..3.0, 10..80),
        x in -3.0f64..3.0,
        h in 0.05f64..2.0,
        shift in -10.0f64..10.0,
    ) {
        let k = Kernel::biweight();
        let p = path_from(&values, 5.0);
        let q = path_from(&values.iter().map(|v| v + shift).collect::<Vec<_>>(), 5.0);
        let a = density_estimate(&p, x, h, &k).unwrap();
        let b = density_estimate(&q, x + shift, h, &k).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
    }

    #[test]
    fn corrected_estimate_is_translation_equivariant(seed in 0u64..500, shift in -5.0f64..5.0) {
        // With linear drift the derivative ratio does not see the level, so
        // shifting the path and the evaluation point leaves the estimate unchanged.
        let k = Kernel::cosine();
        let grid = TimeGrid::with_step(20.0, 0.05).unwrap();
        let drift = DriftModel::linear(1.0).unwrap();
        let cfg = SdeConfig::new(drift.clone(), 1.0, 0.0, grid, hurst()).unwrap();
        let p = solve_euler(&cfg, &sample_fgn_fft(0.7, grid, SeedSpec::new(seed, 0)).unwrap()).unwrap();
        let q = p.map(|v| v + shift).unwrap();
        let spec = CorrectionSpec::new(hurst(), 1.0, RatioMode::Derivative);
        let a = DriftEstimator::new(RatioSource::Model { drift: &drift, path: &p }, spec).unwrap().estimate(0.2, 0.7, &k).unwrap();
        let b = DriftEstimator::new(RatioSource::Model { drift: &drift, path: &q }, spec).unwrap().estimate(0.2 + shift, 0.7, &k).unwrap();
        prop_assert_eq!(a.degenerate, b.degenerate);
        if !a.degenerate {
            prop_assert!((a.estimate - b.estimate).abs() <= 1e-8 * (1.0 + a.estimate.abs()));
            prop_assert!((a.f_hat - b.f_hat).abs() <= 1e-9 * (1.0 + a.f_hat));
        }
    }

    #[test]
    fn power_schedule_invariants(h_idx in 0.51f64..0.99, t1 in 1.01f64..1e4, factor in 1.01f64..10.0) {
        let hu = HurstIndex::new(h_idx).unwrap();
        let s = BandwidthSchedule::power_law();
        let (h1, e1) = schedule_eval(&s, t1, hu).unwrap();
        let (h2, _) = schedule_eval(&s, t1 * factor, hu).unwrap();
        prop_assert!(h1 > 0.0 && h1 < 1.0);
        prop_assert!(h2 < h1);
        prop_assert!((t1 * factor) * h2 > t1 * h1);
        prop_assert!((e1 - h1 * h1).abs() <= 1e-15);
    }
}
