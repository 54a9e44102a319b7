use levy_codebook::codebook::{pi_necessary_check, CodebookSurface, GridSpec, DEFAULT_PI_TOL};
use levy_codebook::dynamics::{
    drift_a, evolve_event_driven, evolve_picard, simulate_subordinator, SolverOptions, SubordinatorPath, VolKernel,
};
use levy_codebook::levy::{bns_gamma, martingale_defect, CharExponent, JumpSpec};
use levy_codebook::models::{black_scholes_codebook, min_compatible_codebook, ou_level, BnsModel, BnsParams};
use levy_codebook::pricing::{codebook_to_modified, modified_from_cumulant, modified_to_calls, PricingOptions};
use levy_codebook::validation::{check_conditional_expectation, check_martingale, simulate_bns};
use num_complex::Complex64;
use proptest::prelude::*;

const I: Complex64 = Complex64::new(0.0, 1.0);

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn jump_spec() -> impl Strategy<Value = JumpSpec> {
    prop_oneof![
        Just(JumpSpec::None),
        (0.01f64..5.0, 1.5f64..20.0).prop_map(|(rate, theta)| JumpSpec::CompoundPoissonExp { rate, theta }),
        (0.01f64..5.0, prop::collection::vec((-0.5f64..0.5, 0.05f64..1.0), 1..4)).prop_map(|(rate, raw)| {
            let total: f64 = raw.iter().map(|r| r.1).sum();
            JumpSpec::CompoundPoissonDiscrete { rate, atoms: raw.into_iter().map(|(x, w)| (x, w / total)).collect() }
        }),
        (0.01f64..5.0, 1.5f64..20.0).prop_map(|(shape, rate)| JumpSpec::Gamma { shape, rate }),
    ]
}

fn bns_params() -> impl Strategy<Value = BnsParams> {
    (0.5f64..2.0, -1.0f64..0.0, 0.2f64..2.0, 1.5f64..4.0, 0.0f64..0.05).prop_map(|(lambda, delta, rate, theta, diff)| {
        BnsParams {
            lambda,
            delta,
            eta: JumpSpec::CompoundPoissonExp { rate, theta },
            psi_l_diffusion: diff,
            psi_l_jumps: JumpSpec::None,
            x0: 0.0,
        }
    })
}

fn random_surface(g: GridSpec, coeffs: [f64; 4]) -> CodebookSurface {
    CodebookSurface::from_fn(g, 0.0, |t, u| {
        c(-coeffs[0] * u * u * (1.0 + coeffs[1] * t), coeffs[2] * u * (t - coeffs[3]).sin())
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    // levy

    #[test]
    fn pi_exponents_are_non_positive_and_normalised(diff in 0.0f64..0.5, jumps in jump_spec()) {
        let psi = CharExponent::pi(diff, jumps).unwrap();
        for k in -40..=40 {
            let u = 0.5 * k as f64;
            prop_assert!(psi.eval_real(u).re <= 1e-12);
        }
        prop_assert!(psi.eval(c(0.0, 0.0)).unwrap().norm() == 0.0);
        prop_assert!(martingale_defect(&psi).unwrap() < 1e-12);
    }

    #[test]
    fn composition_adds_exponents(
        c1 in 0.0f64..0.3, c2 in 0.0f64..0.3,
        r1 in 0.01f64..4.0, r2 in 0.01f64..4.0, th in 1.5f64..10.0, family in 0usize..3,
    ) {
        let (j1, j2) = match family {
            0 => (JumpSpec::CompoundPoissonExp { rate: r1, theta: th }, JumpSpec::CompoundPoissonExp { rate: r2, theta: th }),
            1 => (JumpSpec::Gamma { shape: r1, rate: th }, JumpSpec::Gamma { shape: r2, rate: th }),
            _ => (
                JumpSpec::CompoundPoissonDiscrete { rate: r1, atoms: vec![(-0.2, 0.5), (0.1, 0.5)] },
                JumpSpec::CompoundPoissonDiscrete { rate: r2, atoms: vec![(0.3, 1.0)] },
            ),
        };
        let a = CharExponent::pi(c1, j1).unwrap();
        let b = CharExponent::pi(c2, j2).unwrap();
        let s = a.compose(&b).unwrap();
        for k in -20..=20 {
            let u = 0.5 * k as f64;
            let lhs = s.eval_real(u);
            let rhs = a.eval_real(u) + b.eval_real(u);
            prop_assert!((lhs - rhs).norm() <= 1e-12 * rhs.norm().max(1.0), "u = {}: {} vs {}", u, lhs, rhs);
        }
    }

    #[test]
    fn bns_gamma_derivative_matches_finite_difference(
        rate in 0.1f64..4.0, theta in 1.5f64..6.0, delta in -1.0f64..0.0,
        u in -10.0f64..10.0, vr in -5.0f64..5.0, vi in 0.0f64..1.0,
    ) {
        let eta = CharExponent::subordinator(JumpSpec::CompoundPoissonExp { rate, theta }, 0.0).unwrap();
        let g = bns_gamma(eta, delta).unwrap();
        let v = c(vr, vi);
        let h = 1e-5;
        let fd = (g.eval(u, v + h).unwrap() - g.eval(u, v - h).unwrap()) / (2.0 * h);
        let d = g.d2(u, v).unwrap();
        prop_assert!((fd - d).norm() <= 1e-6 * d.norm().max(1e-3), "{} vs {}", fd, d);
    }

    // codebook

    #[test]
    fn maturity_integral_is_additive(coeffs in prop::array::uniform4(0.0f64..1.0), a in 0usize..11, b in 0usize..11, m in 0usize..11) {
        let g = GridSpec::new(0.1, 11, 0.5, 3.0).unwrap();
        let s = random_surface(g, coeffs);
        let mut idx = [a, b, m];
        idx.sort();
        let (t, mid, big_t) = (g.maturity(idx[0]), g.maturity(idx[1]), g.maturity(idx[2]));
        for k in 0..g.n_frequencies() {
            let whole = s.integrate_maturity_index(t, big_t, k).unwrap();
            let parts = s.integrate_maturity_index(t, mid, k).unwrap() + s.integrate_maturity_index(mid, big_t, k).unwrap();
            prop_assert!((whole - parts).norm() <= 1e-13 * whole.norm().max(1.0));
        }
    }

    #[test]
    fn seminorm_triangle_inequality(c1 in prop::array::uniform4(0.0f64..1.0), c2 in prop::array::uniform4(0.0f64..1.0), m in 0.0f64..3.0) {
        let g = GridSpec::new(0.1, 11, 0.5, 3.0).unwrap();
        let a = random_surface(g, c1);
        let b = random_surface(g, c2);
        let mut sum = a.clone();
        sum.axpy(-1.0, &b).unwrap();
        let lhs = sum.seminorm(1.0, m).unwrap();
        prop_assert!(lhs <= a.seminorm(1.0, m).unwrap() + b.seminorm(1.0, m).unwrap() + 1e-12);
    }

    #[test]
    fn musiela_round_trip(coeffs in prop::array::uniform4(0.0f64..1.0), shift in 0usize..11) {
        let g = GridSpec::new(0.1, 11, 0.5, 3.0).unwrap();
        let mut s = random_surface(g, coeffs);
        s.set_time(g.maturity(shift));
        let back = s.to_musiela().unwrap().from_musiela().unwrap();
        for j in shift..g.n_maturities() {
            prop_assert_eq!(back.row(j), s.row(j));
        }
    }

    // pricing

    #[test]
    fn calls_respect_price_bounds(sigma in 0.05f64..0.6, steps in 1usize..11) {
        let g = GridSpec::new(0.1, 11, 0.05, 40.0).unwrap();
        let s = black_scholes_codebook(sigma, g).unwrap();
        let o = codebook_to_modified(&s, 0.0, g.maturity(steps), &PricingOptions::default()).unwrap();
        let strikes: Vec<f64> = (0..31).map(|i| 0.4 + 0.05 * i as f64).collect();
        let calls = modified_to_calls(&o, 1.0, &strikes).unwrap();
        for (k, cv) in strikes.iter().zip(calls) {
            let put = cv - 1.0 + k;
            prop_assert!(put >= -1e-14 && put <= k + 1e-14, "K = {}: put {}", k, put);
        }
    }

    // dynamics

    #[test]
    fn drift_vanishes_on_expired_maturities(p in bns_params(), t in 0.0f64..1.0) {
        let g = GridSpec::new(0.1, 11, 0.5, 3.0).unwrap();
        let blocks = BnsModel::new(p).unwrap().blocks(g).unwrap();
        let a = drift_a(&blocks, t, &blocks.psi0).unwrap();
        for j in 0..g.n_maturities() {
            if g.maturity(j) < t - 1e-12 {
                prop_assert!(a.row(j).iter().all(|v| *v == c(0.0, 0.0)));
            }
        }
    }

    #[test]
    fn jump_increment_is_linear_in_size(p in bns_params(), when in 1usize..9, size in 0.1f64..2.0) {
        let g = GridSpec::new(0.1, 11, 0.5, 3.0).unwrap();
        let blocks = BnsModel::new(p).unwrap().blocks(g).unwrap();
        let t = g.maturity(when) + 0.05;
        let opts = SolverOptions { checkpoints: vec![t], ..SolverOptions::default() };
        let run = |x: f64| {
            let jumps = if x > 0.0 { vec![(t, x)] } else { Vec::new() };
            let path = SubordinatorPath::new(1.0, 0.0, jumps).unwrap();
            evolve_picard(&blocks, &path, t, &opts).unwrap().surfaces[0].clone()
        };
        let base = run(0.0);
        let (one, two) = (run(size), run(2.0 * size));
        for ((b, x1), x2) in base.values().iter().zip(one.values()).zip(two.values()) {
            let (d1, d2) = (x1 - b, x2 - b);
            prop_assert!((d2 - 2.0 * d1).norm() <= 1e-12 * d1.norm().max(1.0));
        }
    }

    #[test]
    fn trajectories_are_seed_deterministic(p in bns_params(), seed in any::<u64>()) {
        let g = GridSpec::new(0.1, 6, 0.5, 2.0).unwrap();
        let blocks = BnsModel::new(p.clone()).unwrap().blocks(g).unwrap();
        let run = || {
            let path = simulate_subordinator(&p.eta, 0.5, seed).unwrap();
            evolve_picard(&blocks, &path, 0.5, &SolverOptions::default()).unwrap()
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.times, b.times);
        for (x, y) in a.surfaces.iter().zip(&b.surfaces) {
            prop_assert_eq!(x.values(), y.values());
        }
    }

    // models

    #[test]
    fn diagonal_matches_local_exponent(p in bns_params(), seed in any::<u64>(), j in 1usize..10) {
        let model = BnsModel::new(p.clone()).unwrap();
        let path = simulate_subordinator(&p.eta, 1.0, seed).unwrap();
        let g = GridSpec::new(0.1, 11, 0.5, 5.0).unwrap();
        let t = g.maturity(j);
        prop_assume!(path.jump_at(t).is_none());
        let s = model.closed_codebook(g, t, |r| ou_level(&path, p.lambda, r)).unwrap();
        let z = ou_level(&path, p.lambda, t);
        for k in 0..g.n_frequencies() {
            let u = c(g.frequency(k), 0.0);
            let local = model.local_exponent(u, z).unwrap();
            prop_assert!((s.get(j, k) - local).norm() <= 1e-10 * local.norm().max(1.0));
        }
    }

    #[test]
    fn minimal_codebook_is_admissible(p in bns_params()) {
        let g = GridSpec::new(0.1, 11, 0.5, 5.0).unwrap();
        let vol = VolKernel::deterministic_exp(CharExponent::black_scholes(1.0).unwrap(), p.lambda).unwrap();
        let eta = CharExponent::subordinator(p.eta.clone(), 0.0).unwrap();
        let gamma = bns_gamma(eta, p.delta).unwrap();
        let mu = min_compatible_codebook(&vol, &gamma, g).unwrap();
        for j in 0..g.n_maturities() {
            prop_assert!(pi_necessary_check(&mu, g.maturity(j), DEFAULT_PI_TOL).passed());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn solvers_agree_on_random_instances(p in bns_params(), seed in any::<u64>()) {
        let g = GridSpec::new(0.1, 11, 0.5, 5.0).unwrap();
        let blocks = BnsModel::new(p.clone()).unwrap().blocks(g).unwrap();
        let path = simulate_subordinator(&p.eta, 1.0, seed).unwrap();
        let a = evolve_picard(&blocks, &path, 1.0, &SolverOptions::default()).unwrap();
        let b = evolve_event_driven(&blocks, &path, 1.0, &SolverOptions { tol: 1e-10, ..SolverOptions::default() }).unwrap();
        // 10 (tol_picard + step^4)
        prop_assert!(a.max_abs_diff(&b) < 10.0 * (1e-12 + 1e-8));
    }
}

#[test]
fn forward_transform_of_modified_prices() {
    let (sigma, t) = (0.2, 1.0);
    let v = sigma * sigma * t;
    let cum = move |z: Complex64| Ok(-0.5 * v * (z * z + I * z));
    let o = modified_from_cumulant(cum, t, &PricingOptions::default()).unwrap();
    let dx = o.x[1] - o.x[0];
    let last = o.x.len() - 1;
    for k in 1..=20 {
        let u = 0.5 * k as f64;
        let mut f = c(0.0, 0.0);
        for (q, (&x, &val)) in o.x.iter().zip(&o.values).enumerate() {
            let w = if q == 0 || q == last { 0.5 } else { 1.0 };
            f += w * val * (I * u * x).exp();
        }
        // trapezoid plus the Euler-Maclaurin term of the unit slope jump at x = 0
        f = f * dx - dx * dx / 12.0;
        let target = (1.0 - cum(c(u, 0.0)).unwrap().exp()) / c(u * u, u);
        assert!((f - target).norm() < 1e-6, "u = {u}: {f} vs {target}");
    }
}

#[test]
fn bs_prices_stable_under_refinement() {
    let g = GridSpec::new(0.1, 11, 0.05, 40.0).unwrap();
    let fine = GridSpec::new(0.1, 11, 0.025, 40.0).unwrap();
    let strikes: Vec<f64> = (0..21).map(|i| 0.5 + 0.075 * i as f64).collect();
    let price = |g: GridSpec, hw: f64| {
        let s = black_scholes_codebook(0.2, g).unwrap();
        let o = codebook_to_modified(&s, 0.0, 1.0, &PricingOptions { half_width: Some(hw), ..PricingOptions::default() }).unwrap();
        modified_to_calls(&o, 1.0, &strikes).unwrap()
    };
    let a = price(g, 2.0);
    let b = price(fine, 4.0);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-7, "{x} vs {y}");
    }
}

fn bs_preset() -> BnsModel {
    BnsModel::new(BnsParams {
        lambda: 1.0,
        delta: 0.0,
        eta: JumpSpec::CompoundPoissonExp { rate: 0.0, theta: 2.0 },
        psi_l_diffusion: 0.04,
        psi_l_jumps: JumpSpec::None,
        x0: 0.0,
    })
    .unwrap()
}

#[test]
fn mc_statistics_are_seed_deterministic() {
    let model = BnsModel::new(BnsParams::desk_preset().with_sigma_l(0.1)).unwrap();
    let g = GridSpec::new(0.05, 21, 0.5, 2.0).unwrap();
    let psi0 = model.blocks(g).unwrap().psi0;
    let run = || {
        let paths = simulate_bns(&model, 2000, 20, 1.0, 5, 99).unwrap();
        let mut r = check_conditional_expectation(&paths, &psi0, 0.0, &[0.5, 1.0], 1.0).unwrap();
        r.merge(check_martingale(&paths, 0.0, &[(1.0, 1.0, 0.05)]).unwrap());
        r
    };
    let (a, b) = (run(), run());
    for (x, y) in a.checks.iter().zip(&b.checks) {
        assert_eq!(x.statistic.to_bits(), y.statistic.to_bits());
        assert_eq!(x.standard_error.map(f64::to_bits), y.standard_error.map(f64::to_bits));
    }
}

#[test]
fn standard_errors_halve_when_paths_quadruple() {
    let model = bs_preset();
    let se = |n: usize| {
        let paths = simulate_bns(&model, n, 10, 1.0, 10, 5).unwrap();
        check_martingale(&paths, 0.0, &[(1.0, 1.0, 0.0)]).unwrap().checks.iter().map(|c| c.standard_error.unwrap()).collect::<Vec<_>>()
    };
    let (a, b) = (se(10_000), se(40_000));
    for (x, y) in a.iter().zip(&b) {
        let ratio = y / x;
        assert!((ratio - 0.5).abs() <= 0.1, "ratio {ratio}");
    }
}

#[test]
fn cf_check_at_zero_frequency_is_exact() {
    let model = bs_preset();
    let g = GridSpec::new(0.1, 11, 0.5, 2.0).unwrap();
    let psi0 = model.blocks(g).unwrap().psi0;
    let paths = simulate_bns(&model, 500, 10, 1.0, 10, 1).unwrap();
    let r = check_conditional_expectation(&paths, &psi0, 0.0, &[0.0], 1.0).unwrap();
    assert!(r.passed);
    assert!(r.checks.iter().all(|c| c.statistic == 0.0));
}
