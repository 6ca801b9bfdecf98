use std::f64::consts::PI;

use branchlab::bbm::{many_to_few_lhs, BbmConfig, Harmonics, ReversedProcess};
use branchlab::functional::Functional;
use branchlab::quad::GaussLegendre;
use branchlab::rng::stream;
use branchlab::spectral::{solve_slp, LimitSolution, Potential, SpectralSolution};
use branchlab::spine::*;
use branchlab::stats::{ks_two_sample, z_score};
use branchlab::ultrametric::Composition;

fn zero(l: f64) -> (SpectralSolution, SpineConfig) {
    let sol = solve_slp(&Potential::Zero, l, 1e-12).unwrap();
    let cfg = SpineConfig::new(&sol).unwrap();
    (sol, cfg)
}

/// `M^{2,t}_x[1]` for W = 0 from the sine expansion of the killed heat
/// kernel: the spine kernel is `q_s(x, y) = e^{ws} sin(pi y/L)/sin(pi x/L) K_s(x, y)`.
fn zero_potential_m2(sol: &SpectralSolution, x: f64, t: f64) -> f64 {
    let l = sol.l;
    let w = sol.w;
    let rule = GaussLegendre::new(32);
    let ys: Vec<(f64, f64)> = (0..100).flat_map(|p| rule.points(p as f64 * l / 100.0, (p + 1) as f64 * l / 100.0).collect::<Vec<_>>()).collect();
    let hy: Vec<f64> = ys.iter().map(|&(y, _)| sol.h_at(y) * (PI * y / l).sin()).collect();
    let modes = 400;
    // c_n = int sin(n pi y / L) sin(pi y / L) h(y) dy
    let c: Vec<f64> = (1..=modes).map(|n| ys.iter().zip(&hy).map(|(&(y, wt), &g)| wt * g * (n as f64 * PI * y / l).sin()).sum()).collect();
    let e_rh = |s: f64| {
        let sum: f64 = (1..=modes)
            .map(|n| {
                let nf = n as f64;
                (nf * PI * x / l).sin() * (-nf * nf * PI * PI * s / (2.0 * l * l)).exp() * c[n - 1]
            })
            .sum();
        0.5 * (w * s).exp() * 2.0 / l * sum / (PI * x / l).sin()
    };
    let mut total = 0.0;
    let small = 2e-3;
    total += small * 0.5 * sol.h_at(x);
    let panels = 64;
    for p in 0..panels {
        let a = small + (t - small) * p as f64 / panels as f64;
        let b = small + (t - small) * (p + 1) as f64 / panels as f64;
        total += rule.integrate(a, b, |s| (-w * s).exp() * (-2.0 * w * (t - s)).exp() * e_rh(s));
    }
    total
}

#[test]
fn two_spine_matches_heat_kernel_oracle() {
    let (sol, cfg) = zero(4.0);
    let (x, t) = (1.5, 1.0);
    let exact = zero_potential_m2(&sol, x, t);
    let est = k_spine(&cfg, x, 2, t, &Functional::one(2), &KSpineBudget::with_outer(20_000), 5).unwrap();
    let z = (est.value - exact) / est.stderr;
    assert!(z.abs() < 3.5, "{} +- {} vs {exact}", est.value, est.stderr);
    assert!(est.retry_rate < 1e-4);
    let bound = m2_green_bound(&sol, x, t).unwrap();
    assert!(exact <= bound, "{exact} > {bound}");
}

#[test]
fn two_spine_matches_bbm_pairs() {
    let (sol, cfg) = zero(4.0);
    let bbm = BbmConfig::from_solution(&sol).unwrap();
    let h = Harmonics::new(&sol);
    let (x, t) = (2.0, 1.0);
    let lhs = many_to_few_lhs(&bbm, &h, x, 2, t, &Functional::one(2), 40_000, 8).unwrap();
    let est = k_spine(&cfg, x, 2, t, &Functional::one(2), &KSpineBudget::with_outer(10_000), 9).unwrap();
    let rhs = 2.0 * h.h(x) * est.value;
    let z = z_score(lhs.mean, lhs.stderr(), rhs, 2.0 * h.h(x) * est.stderr);
    assert!(z.abs() < 3.5, "{} +- {} vs {rhs}", lhs.mean, lhs.stderr());
}

#[test]
fn nested_and_tree_samplers_agree() {
    let (_, cfg) = zero(4.0);
    let g = Functional::depth_polynomial(Composition(vec![1, 2]), vec![0.0, 1.0], 0.0).unwrap();
    let nested = k_spine(&cfg, 2.0, 3, 1.0, &g, &KSpineBudget { outer: 4000, ..KSpineBudget::default() }, 2).unwrap();
    assert_eq!(nested.method, "nested");
    // A gap far below the time step leaves the functional unchanged but forces the tree sampler.
    let g_eps = Functional::depth_polynomial(Composition(vec![1, 2]), vec![0.0, 1.0], 1e-12).unwrap();
    let tree = k_spine(&cfg, 2.0, 3, 1.0, &g_eps, &KSpineBudget::with_outer(60_000), 3).unwrap();
    assert_eq!(tree.method, "tree");
    let z = z_score(nested.value, nested.stderr, tree.value, tree.stderr);
    assert!(z.abs() < 3.5, "{} +- {} vs {} +- {}", nested.value, nested.stderr, tree.value, tree.stderr);
}

#[test]
fn epsilon_gap_converges() {
    let (_, cfg) = zero(4.0);
    let budget = KSpineBudget::with_outer(40_000);
    let base = k_spine(&cfg, 2.0, 3, 1.0, &Functional::indicator(Composition(vec![1, 2]), 0.0).unwrap(), &budget, 4).unwrap();
    let diffs: Vec<f64> = [0.4, 0.2, 0.05]
        .iter()
        .map(|&e| {
            let g = Functional::indicator(Composition(vec![1, 2]), e).unwrap();
            (k_spine(&cfg, 2.0, 3, 1.0, &g, &budget, 4).unwrap().value - base.value).abs()
        })
        .collect();
    assert!(diffs[0] > diffs[1] && diffs[1] > diffs[2], "{diffs:?}");
}

#[test]
fn stationary_from_pi() {
    let sol = solve_slp(&Potential::step(4.0), 6.0, 1e-12).unwrap();
    let cfg = SpineConfig::new(&sol).unwrap().with_dt(2e-3).unwrap();
    let pi = PiSampler::new(&cfg.harmonics);
    let n = 20_000;
    let mut rng = stream(1, "pi-test", 0);
    let fresh: Vec<f64> = (0..n).map(|_| pi.sample(&mut rng)).collect();
    let moved: Vec<f64> = (0..n)
        .map(|i| {
            let mut r = stream(2, "pi-test", i);
            let x0 = pi.sample(&mut r);
            simulate_spine(&cfg, x0, 0.5, &[0.5], &mut r).unwrap().xs[0]
        })
        .collect();
    let (_, p) = ks_two_sample(&fresh, &moved);
    assert!(p > 0.01, "KS p-value {p}");
}

#[test]
fn mixing_reaches_noise_floor() {
    let (_, cfg) = zero(4.0);
    let cfg = cfg.with_dt(2e-3).unwrap();
    let rows = mixing_diagnostics(&cfg, 3.9, &[0.1, 8.0], 20_000, 64, 3).unwrap();
    assert!(rows[0].tv > 0.3);
    assert!(rows[1].tv < 0.02 + rows[1].tv_floor, "{rows:?}");
    assert!(rows[1].retry_rate < 1e-4);
}

fn reversed() -> ReversedProcess {
    let lim = LimitSolution::new(&Potential::step_for_alpha(1.5, 1.0).unwrap()).unwrap();
    ReversedProcess::from_limit(&lim).unwrap()
}

#[test]
fn reversed_routes_agree() {
    let p = reversed();
    let r1 = k_spine_reversed(&p, 1.0, 1, 3.0, 4000, 5).unwrap();
    assert!((r1.quadrature_inf - 1.0).abs() < 1e-12);
    assert!(!r1.inconsistent);
    let r2 = k_spine_reversed(&p, 2.0, 2, 6.0, 40_000, 6).unwrap();
    assert!(r2.z_score.abs() < 3.5, "{r2:?}");
    // The finite-horizon mass increases towards the limit.
    assert!(r2.quadrature_horizon.unwrap() < r2.quadrature_inf * 1.5);
}

#[test]
fn reversed_limit_matches_green_integral() {
    let p = reversed();
    let t = ReversedMomentTable::new(&p, 2, 5.0, 1.0 / 512.0).unwrap();
    let rule = GaussLegendre::new(32);
    for &z in &[0.5, 2.0, 4.0] {
        let mut direct = 0.0;
        let mut a: f64 = 0.0;
        while a < 400.0 {
            let b = if a < z && a + 0.25 > z { z } else { a + 0.25 };
            direct += rule.integrate(a.max(1e-12), b, |y| p.green(z, y).unwrap() * p.h(y));
            a = b;
        }
        assert!((t.get(2, z) - direct).abs() < 1e-6 * direct, "z={z}: {} vs {direct}", t.get(2, z));
    }
}

#[test]
fn reversed_spine_occupation_is_twice_green() {
    let p = ReversedProcess::new(2f64.sqrt(), 1.0, 1.0, 1.0).unwrap();
    let (z, y, d) = (1.0, 1.5, 0.1);
    let acc = reversed_occupation(&p, z, y, d, 30.0, 1e-3, 4000, 7);
    // Window average of the occupation density.
    let rule = GaussLegendre::new(16);
    let exact = rule.integrate(y - d, y + d, |s| p.spine_occupation(z, s).unwrap()) / (2.0 * d);
    let z_ = (acc.mean - exact) / acc.stderr();
    assert!(z_.abs() < 3.5, "{} +- {} vs {exact}", acc.mean, acc.stderr());
}

#[test]
fn jump_moment_scaling_in_a() {
    let p = reversed();
    let t = ReversedMomentTable::new(&p, 3, 1.0, 1.0 / 256.0).unwrap();
    for k in 2..=3 {
        let m1 = jump_moment_limit(&p, k, 1.0, &t).unwrap();
        let m2 = jump_moment_limit(&p, k, 2.0, &t).unwrap();
        assert!((m2 / m1 - 2f64.powf(k as f64 - p.alpha)).abs() < 1e-12);
    }
}
