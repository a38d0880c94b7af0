use fsde_core::estimators::Kernel;
use fsde_core::gaussdiag::*;
use fsde_core::fgn::HurstIndex;
use fsde_core::grid::{SeedSpec, TimeGrid};
use fsde_core::sde::stationary_ou_path;
use fsde_core::stats;
use proptest::prelude::*;
use rayon::prelude::*;

/// Trapezoid rule on [-12, 12]; exponentially accurate for Gaussian-weighted
/// polynomials, and independent of the library's adaptive quadrature.
fn gauss_expect(f: impl Fn(f64) -> f64) -> f64 {
    let n = 24_000;
    let dy = 24.0 / n as f64;
    let w = (2.0 * std::f64::consts::PI).sqrt().recip();
    (0..=n)
        .map(|i| {
            let y = -12.0 + i as f64 * dy;
            let c = if i == 0 || i == n { 0.5 } else { 1.0 };
            c * f(y) * w * (-0.5 * y * y).exp()
        })
        .sum::<f64>()
        * dy
}

#[test]
fn hermite_orthogonality() {
    let h = |q, y| hermite_poly(q, y).unwrap();
    assert!(gauss_expect(|y| h(3, y) * h(2, y)).abs() < 1e-10);
    assert!((gauss_expect(|y| h(3, y) * h(3, y)) - 6.0).abs() < 1e-8);
    for p in 0..8 {
        for q in 0..8 {
            let v = gauss_expect(|y| h(p, y) * h(q, y));
            let want = if p == q { (1..=q).map(|k| k as f64).product::<f64>() } else { 0.0 };
            assert!((v - want).abs() < 1e-8 * want.max(1.0), "p={p} q={q}: {v}");
        }
    }
}

#[test]
fn coefficients_match_independent_quadrature() {
    let k = Kernel::biweight();
    let (h, x, s0) = (0.3, 0.4, 1.1);
    let c = hermite_coeffs_of_kernel_functional(&k, h, x, s0, 6).unwrap();
    let r = gauss_expect(|y| k.scaled(s0 * y - x, h));
    let g = |y: f64| k.scaled(s0 * y - x, h) - r;
    // The trapezoid oracle sees the kink of G at the support edge, hence 1e-6.
    for q in 0..=6 {
        let want = gauss_expect(|y| g(y) * hermite_poly(q, y).unwrap());
        assert!((c.j[q] - want).abs() < 1e-6, "q={q}: {} vs {want}", c.j[q]);
    }
    assert!((c.second_moment - gauss_expect(|y| g(y).powi(2))).abs() < 1e-6);
}

#[test]
fn parseval_bound_over_bandwidths() {
    let nu_sup = normal_density(0.0);
    for k in [Kernel::biweight(), Kernel::cosine()] {
        for &h in &[0.5, 0.2, 0.1] {
            for &x in &[0.5, 1.0] {
                let s0 = 1.0;
                let c = hermite_coeffs_of_kernel_functional(&k, h, x, s0, 40).unwrap();
                let sums = c.parseval_partial_sums();
                assert!(sums.windows(2).all(|w| w[1] >= w[0]));
                assert!(*sums.last().unwrap() <= c.second_moment * (1.0 + 1e-6));
                let r = convolved_density(&k, h, x, s0).unwrap();
                let bound = 2.0 * k.sup().powi(2) * nu_sup / (s0 * h) + 2.0 * r * r;
                assert!(*sums.last().unwrap() <= bound, "h={h}");
                assert!(c.j[0].abs() < 1e-10);
            }
        }
    }
}

#[test]
fn rank_is_one_off_center_and_two_at_center() {
    let k = Kernel::biweight();
    for &h in &[0.5, 0.2, 0.1] {
        let c = hermite_coeffs_of_kernel_functional(&k, h, 0.6, 1.0, 4).unwrap();
        assert_eq!(c.rank, Some(1));
        assert!(c.j[1] > 0.0);
        let c = hermite_coeffs_of_kernel_functional(&k, h, -0.6, 1.0, 4).unwrap();
        assert!(c.j[1] < 0.0);
        let c = hermite_coeffs_of_kernel_functional(&k, h, 0.0, 1.0, 4).unwrap();
        assert_eq!(c.rank, Some(2));
    }
}

#[test]
fn parseval_series_approaches_second_moment() {
    // Coefficients of a compactly supported bump decay slowly: the share
    // captured by the default degree is partial and drops as h shrinks.
    let k = Kernel::biweight();
    let share = |h: f64| {
        let c = hermite_coeffs_of_kernel_functional(&k, h, 0.5, 1.0, MAX_HERMITE_DEGREE).unwrap();
        let s = c.parseval_partial_sums();
        (s[DEFAULT_Q_MAX - 1] / c.second_moment, s[MAX_HERMITE_DEGREE - 1] / c.second_moment)
    };
    let (wide12, wide50) = share(0.5);
    let (narrow12, _) = share(0.1);
    println!("share of E[G^2]: h=0.5 q<=12 {wide12:.3} q<=50 {wide50:.3}; h=0.1 q<=12 {narrow12:.3}");
    assert!(wide50 > 0.9 && wide50 <= 1.0 + 1e-6);
    assert!(wide12 < wide50);
    assert!(narrow12 < wide12);
}

#[test]
fn convolved_density_converges_to_target() {
    let k = Kernel::biweight();
    let (x, s0) = (0.7, 1.3);
    let target = normal_density(x / s0) / s0;
    let errs: Vec<f64> = [0.4, 0.2, 0.1]
        .iter()
        .map(|&h| (convolved_density(&k, h, x, s0).unwrap() - target).abs())
        .collect();
    assert!(errs[1] < errs[0] && errs[2] < errs[1], "{errs:?}");
}

#[test]
fn mehler_examples() {
    let c = mehler_check(1, 0.5, 100_000, SeedSpec::new(1, 0)).unwrap();
    assert!(c.within(5.0));
    let c = mehler_check(2, 0.0, 100_000, SeedSpec::new(1, 1)).unwrap();
    assert_eq!(c.predicted, 0.0);
    assert!(c.within(5.0));
    let c = mehler_check(3, 0.8, 100_000, SeedSpec::new(1, 2)).unwrap();
    assert!((c.predicted - 3.072).abs() < 1e-12);
    assert!(c.within(5.0));
}

#[test]
fn autocorr_double_integral_limits() {
    let (t, dt) = (10.0, 0.1);
    let n = 100;
    let mut white = vec![0.0; n];
    white[0] = 1.0;
    assert!((autocorr_double_integral(&white, t, dt).unwrap() - dt * t).abs() < 1e-12);
    let ones = vec![1.0; n];
    assert!((autocorr_double_integral(&ones, t, dt).unwrap() - t * t).abs() < 1e-9);
    assert!(autocorr_double_integral(&ones[..50], t, dt).is_err());
}

#[test]
fn variance_prediction_chain() {
    // Var of the time average of G(Y / sigma0) against the Hermite bound.
    let hurst = HurstIndex::new(0.7).unwrap();
    let k = Kernel::biweight();
    let (x, h, t, dt) = (0.5, 0.5, 200.0, 0.05);
    let grid = TimeGrid::with_step(t, dt).unwrap();
    let paths: Vec<Vec<f64>> = (0..200u64)
        .into_par_iter()
        .map(|r| {
            stationary_ou_path(1.0, 1.0, grid, hurst, SeedSpec::new(77, r), Some(20.0))
                .unwrap()
                .into_values()
        })
        .collect();
    let s0 = stats::mean(&paths.iter().map(|p| stats::variance(p)).collect::<Vec<_>>()).sqrt();
    let c = hermite_coeffs_of_kernel_functional(&k, h, x, s0, 1).unwrap();
    let r = convolved_density(&k, h, x, s0).unwrap();
    let n = grid.steps();
    let (averages, doubles): (Vec<f64>, Vec<f64>) = paths
        .par_iter()
        .map(|p| {
            let avg = p[..n].iter().map(|&y| k.scaled(y - x, h) - r).sum::<f64>() * dt / t;
            let rho = empirical_autocorrelation(&p[..n], n - 1).unwrap();
            (avg, autocorr_double_integral(&rho, t, dt).unwrap())
        })
        .unzip();
    let var = stats::variance(&averages);
    // Parseval: the full series sum_{q >= 1} J[q]^2 / q! equals E[G^2].
    let predicted = stats::mean(&doubles) / (t * t) * c.second_moment;
    println!("variance {var:.3e}, predicted bound {predicted:.3e}");
    assert!(var <= predicted * 1.5);
}

proptest! {
    #[test]
    fn recurrence_matches_explicit_polynomials(y in -8.0f64..8.0) {
        let explicit = [
            1.0,
            y,
            y * y - 1.0,
            y.powi(3) - 3.0 * y,
            y.powi(4) - 6.0 * y * y + 3.0,
            y.powi(5) - 10.0 * y.powi(3) + 15.0 * y,
        ];
        for (q, e) in explicit.iter().enumerate() {
            let v = hermite_poly(q, y).unwrap();
            prop_assert!((v - e).abs() <= 1e-12 * e.abs().max(1.0));
        }
    }

    #[test]
    fn autocorrelation_is_normalized_and_bounded(v in prop::collection::vec(-5.0f64..5.0, 8..64)) {
        prop_assume!(stats::variance(&v) > 1e-6);
        let rho = empirical_autocorrelation(&v, v.len() - 1).unwrap();
        prop_assert!((rho[0] - 1.0).abs() < 1e-12);
        prop_assert!(rho.iter().all(|r| r.abs() <= 1.0 + 1e-12));
    }
}
