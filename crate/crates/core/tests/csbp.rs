use branchlab::csbp::*;
use branchlab::functional::{Functional, ScalarFn};
use branchlab::rng::stream;
use branchlab::stats::Accumulator;
use branchlab::ultrametric::{Composition, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stable() -> BranchingMechanism {
    BranchingMechanism::alpha_stable(1.0, 1.5).unwrap()
}

fn mixed() -> BranchingMechanism {
    BranchingMechanism::new(
        0.0,
        0.5,
        JumpMeasure::CutoffStable { a: 2.0, alpha: 1.5, base: MomentedMeasure::LebesgueOn01 },
    )
    .unwrap()
}

fn atoms() -> BranchingMechanism {
    BranchingMechanism::new(0.2, 0.3, JumpMeasure::Tabulated { xs: vec![0.5, 2.0], ws: vec![1.0, 0.25] }).unwrap()
}

#[test]
fn stable_rate_examples() {
    let rates = ReducedRates::new(&LaplaceFlow::new(&stable()).unwrap(), 1.0).unwrap();
    assert!((rates.growth(1.0).unwrap() - 2.0).abs() < 1e-10);
    assert!((rates.rate(1.0).unwrap() - 1.0).abs() < 1e-10);
    let (rd, rj) = rates.rate_components(0.3).unwrap();
    assert_eq!(rd, 0.0);
    assert!((rj - rates.rate(0.3).unwrap()).abs() < 1e-10 * rj);
}

#[test]
fn feller_rate_examples() {
    let rates = ReducedRates::new(&LaplaceFlow::new(&BranchingMechanism::feller(1.0)).unwrap(), 2.0).unwrap();
    for &tau in &[0.1, 1.0, 2.0] {
        assert!((rates.factorial_moment(tau, 2).unwrap() - 2.0 / tau).abs() < 1e-10 / tau);
        assert!((rates.rate(tau).unwrap() - 1.0 / tau).abs() < 1e-10 / tau);
    }
}

#[test]
fn mixture_components_sum_to_total_rate() {
    for mech in [mixed(), atoms()] {
        let rates = ReducedRates::new(&LaplaceFlow::new(&mech).unwrap(), 1.0).unwrap();
        for &tau in &[1e-4, 0.01, 0.3, 1.0] {
            let (rd, rj) = rates.rate_components(tau).unwrap();
            let r = rates.rate(tau).unwrap();
            assert!((rd + rj - r).abs() < 1e-10 * r, "tau={tau}: {rd}+{rj} vs {r}");
        }
    }
}

#[test]
fn compensation_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for mech in [stable(), BranchingMechanism::feller(1.0), mixed(), atoms()] {
        let flow = LaplaceFlow::new(&mech).unwrap();
        for _ in 0..5 {
            let t = rng.random_range(0.3..3.0);
            let s = rng.random_range(0.0..0.95) * t;
            let rates = ReducedRates::new(&flow, t).unwrap();
            let expect = flow.ubar(t).unwrap() / flow.ubar(t - s).unwrap() * (s * mech.b).exp();
            let exact = rates.compensation_exact(s).unwrap();
            let table = rates.compensation(s);
            assert!((exact - expect).abs() < 1e-10 * expect, "{mech:?} t={t} s={s}: {exact} vs {expect}");
            assert!((table - expect).abs() < 1e-8 * expect, "table {table} vs {expect}");
        }
    }
}

#[test]
fn sibuya_law_matches_ratio_recursion() {
    let alpha = 1.5;
    let mut p = vec![0.0; 12];
    p[2] = alpha / 2.0;
    for i in 2..11 {
        p[i + 1] = p[i] * (i as f64 - alpha) / (i as f64 + 1.0);
    }
    for n in 3..12u64 {
        let tail = 1.0 - p[2..n as usize].iter().sum::<f64>();
        assert!((sibuya_survival(alpha, n) - tail).abs() < 1e-13, "n={n}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 200_000;
    let twos = (0..n).filter(|_| sample_sibuya(alpha, &mut rng) == 2).count() as f64 / n as f64;
    let se = (p[2] * (1.0 - p[2]) / n as f64).sqrt();
    assert!((twos - p[2]).abs() < 4.0 * se);
}

#[test]
fn conditioned_poisson_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &lam in &[0.05, 0.7, 3.0] {
        let n = 100_000;
        let acc = Accumulator::from_slice(&(0..n).map(|_| sample_poisson_at_least_two(lam, &mut rng) as f64).collect::<Vec<_>>());
        // E[K | K >= 2] = (lam - lam e^{-lam}) / (1 - e^{-lam}(1 + lam)).
        let e = (-lam as f64).exp();
        let expect = (lam - lam * e) / (1.0 - e * (1.0 + lam));
        assert!((acc.mean - expect).abs() < 4.0 * acc.stderr(), "lam={lam}: {} vs {expect}", acc.mean);
    }
}

#[test]
fn offspring_factorial_moments() {
    for mech in [mixed(), atoms()] {
        let rates = ReducedRates::new(&LaplaceFlow::new(&mech).unwrap(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &tau in &[0.05, 0.5] {
            let r = rates.rate(tau).unwrap();
            let n = 200_000;
            let ks: Vec<f64> = (0..n).map(|_| rates.sample_offspring(tau, &mut rng) as f64).collect();
            for k in 2..=3u32 {
                let f: Vec<f64> = ks.iter().map(|&x| (0..k).map(|i| x - i as f64).product::<f64>() * r).collect();
                let acc = Accumulator::from_slice(&f);
                let expect = rates.factorial_moment(tau, k).unwrap();
                assert!((acc.mean - expect).abs() < 3.5 * acc.stderr(), "{mech:?} tau={tau} k={k}: {} +- {} vs {expect}", acc.mean, acc.stderr());
            }
        }
    }
}

#[test]
fn tabulated_hazard_agrees_with_closed_form() {
    let flow = LaplaceFlow::new(&stable()).unwrap();
    let exact = ReducedRates::new(&flow, 1.0).unwrap();
    let table = ReducedRates::new(&flow, 1.0).unwrap().force_tabulated();
    for &tau in &[1e-8, 1e-3, 0.2, 0.9999] {
        let a = exact.cumulative_hazard(tau);
        let b = table.cumulative_hazard(tau);
        assert!((a - b).abs() < 1e-9, "tau={tau}: {a} vs {b}");
    }
    // Same lifetime law through both inversion routes.
    let mut r1 = ChaCha8Rng::seed_from_u64(9);
    let mut r2 = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let a = exact.sample_split_tau(0.8, &mut r1);
        let b = table.sample_split_tau(0.8, &mut r2);
        assert!((a - b).abs() < 1e-9 * a.max(1e-12));
    }
}

#[test]
fn root_is_alone_at_time_zero() {
    let rates = ReducedRates::new(&LaplaceFlow::new(&stable()).unwrap(), 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let tree = simulate_reduced(&rates, 0.5, &mut rng).unwrap();
        assert_eq!(tree.count_alive(0.0), 1);
        assert_eq!(tree.nodes[0].label, Vec::<u32>::new());
        assert_eq!(tree.nodes[0].sigma, 0.0);
    }
}

#[test]
fn tree_structure_invariants() {
    let rates = ReducedRates::new(&LaplaceFlow::new(&mixed()).unwrap(), 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let tree = simulate_reduced(&rates, 0.8, &mut rng).unwrap();
        for (i, n) in tree.nodes.iter().enumerate() {
            if let Some(p) = n.parent {
                let par = &tree.nodes[p];
                assert!(p < i);
                assert_eq!(&n.label[..n.label.len() - 1], &par.label[..]);
                assert!((n.sigma - (par.sigma + par.omega)).abs() < 1e-15);
                assert!(*n.label.last().unwrap() as u64 <= par.k);
            }
            if !n.censored {
                assert!(n.k >= 2);
            }
        }
        // Labels in lexicographic order.
        for w in tree.nodes.windows(2) {
            assert!(w[0].label < w[1].label);
        }
    }
}

#[test]
fn streaming_count_matches_tree_count_in_law() {
    let rates = ReducedRates::new(&LaplaceFlow::new(&stable()).unwrap(), 1.0).unwrap();
    let n = 20_000;
    let a: Vec<f64> = (0..n)
        .map(|i| simulate_reduced(&rates, 0.5, &mut stream(1, "tree", i)).unwrap().count_alive(0.5) as f64)
        .collect();
    let b: Vec<f64> = (0..n).map(|i| reduced_count(&rates, 0.5, &mut stream(1, "count", i)).unwrap() as f64).collect();
    let (aa, bb) = (Accumulator::from_slice(&a), Accumulator::from_slice(&b));
    let z = (aa.mean - bb.mean) / (aa.variance() / n as f64 + bb.variance() / n as f64).sqrt();
    assert!(z.abs() < 4.0, "z = {z}");
    // E[Z_{0.5,1}] = ubar_{0.5} / ubar_1 = 4.
    assert!((aa.mean - 4.0).abs() < 4.0 * aa.stderr());
}

#[test]
fn martingale_has_unit_mean_for_mixture() {
    let rates = ReducedRates::new(&LaplaceFlow::new(&atoms()).unwrap(), 1.0).unwrap();
    let n = 20_000;
    let w: Vec<f64> = (0..n)
        .map(|i| {
            let tree = simulate_reduced(&rates, 0.6, &mut stream(4, "mart", i)).unwrap();
            martingale(&tree, &rates, 0.6)
        })
        .collect();
    let acc = Accumulator::from_slice(&w);
    assert!((acc.mean - 1.0).abs() < 4.0 * acc.stderr(), "{} +- {}", acc.mean, acc.stderr());
}

#[test]
fn genealogies_are_planar_and_additive() {
    let rates = ReducedRates::new(&LaplaceFlow::new(&BranchingMechanism::feller(1.0)).unwrap(), 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10_000 {
        let tree = simulate_reduced(&rates, 0.75, &mut rng).unwrap();
        let g = genealogy_at(&tree, &rates, 0.5).unwrap();
        assert_eq!(g.matrix.k(), tree.count_alive(0.5));
        let total: f64 = g.weights.iter().sum();
        let w = martingale(&tree, &rates, 0.75);
        assert!((total - w).abs() < 1e-12 * w.max(1.0));
        assert!(g.matrix.matrix().as_flat().iter().all(|&d| (0.0..=0.5).contains(&d)));
    }
}

#[test]
fn two_leaf_distance_is_time_since_split() {
    let rates = ReducedRates::new(&LaplaceFlow::new(&BranchingMechanism::feller(1.0)).unwrap(), 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut seen = 0;
    while seen < 50 {
        let tree = simulate_reduced(&rates, 0.5, &mut rng).unwrap();
        let alive = tree.alive(0.5);
        if alive.len() == 2 && tree.nodes[alive[0]].parent == Some(0) && tree.nodes[alive[1]].parent == Some(0) {
            let a = tree.nodes[0].omega;
            let g = genealogy_at(&tree, &rates, 0.5).unwrap();
            assert!((g.matrix.get(0, 1) - (0.5 - a)).abs() < 1e-15);
            assert_eq!(g.matrix.get(0, 1), g.matrix.get(1, 0));
            seen += 1;
        }
    }
}

#[test]
fn grid_recursion_matches_nested_quadrature() {
    let mech = BranchingMechanism::new(
        0.3,
        0.4,
        JumpMeasure::CutoffStable { a: 2.0, alpha: 1.5, base: MomentedMeasure::LebesgueOn01 },
    )
    .unwrap();
    let t = 1.2;
    for k in 2..=4 {
        let grid = csbp_moments(&mech, k, t, &Functional::one(k)).unwrap();
        let nested: f64 = planar_measure_points(&mech, k, t, 16).unwrap().iter().map(|(_, w)| w).sum();
        assert!((grid - nested).abs() < 1e-9 * nested, "k={k}: {grid} vs {nested}");
    }
    // A depth-weighted functional with nested children.
    let inner = Functional::depth_polynomial(Composition(vec![1, 1]), vec![0.0, 1.0], 0.0).unwrap();
    let g = Functional::product(Composition(vec![2, 1]), ScalarFn::Polynomial(vec![1.0, 0.0, 1.0]), vec![inner, Functional::one(1)], 0.0).unwrap();
    let grid = csbp_moments(&mech, 3, t, &g).unwrap();
    let nested: f64 = planar_measure_points(&mech, 3, t, 16)
        .unwrap()
        .iter()
        .map(|(u, w)| w * g.eval(&branchlab::ultrametric::MarkedMatrix::unmarked(u.matrix().clone())))
        .sum();
    assert!((grid - nested).abs() < 1e-9 * nested, "{grid} vs {nested}");
}

#[test]
fn moments_are_monotone_in_t() {
    let mech = BranchingMechanism::cutoff_lebesgue(3.0, 1.4).unwrap();
    for k in 2..=5 {
        let curve = csbp_moment_curve(&mech, k, 2.0).unwrap();
        assert!(curve.windows(2).all(|w| w[1].1 >= w[0].1));
    }
}

#[test]
fn unplanarize_examples() {
    let mech = BranchingMechanism::feller(1.0);
    let ubar = 2.0;
    let sym = unplanarize(&mech, 2, 1.0, |_m: &Matrix| 1.0).unwrap();
    assert!((sym - 2.0 * csbp_moments(&mech, 2, 1.0, &Functional::one(2)).unwrap() / ubar).abs() < 1e-12);
    let one = unplanarize(&mech, 1, 1.0, |_m: &Matrix| 3.0).unwrap();
    assert!((one - 3.0 / ubar).abs() < 1e-12);
    // Asymmetric in index 0: the permutation sum symmetrizes it.
    let mech3 = BranchingMechanism { d: 1.0, ..BranchingMechanism::cutoff_lebesgue(2.0, 1.5).unwrap() };
    let g = |m: &Matrix| m.get(0, 1);
    let h = |m: &Matrix| m.get(1, 2);
    let a = unplanarize(&mech3, 3, 1.0, g).unwrap();
    let b = unplanarize(&mech3, 3, 1.0, h).unwrap();
    assert!((a - b).abs() < 1e-12 * a);
    assert!(matches!(unplanarize(&mech, 9, 1.0, |_m: &Matrix| 1.0), Err(branchlab::Error::TooManyLeaves(9))));
}

#[test]
fn entrance_law_basics() {
    let mech = BranchingMechanism::feller(1.0);
    let flow = LaplaceFlow::new(&mech).unwrap();
    let ubar = flow.grey_ubar(1.0).unwrap();
    assert!(entrance_rhs(&flow, ubar, 1.0, 0.0).unwrap().abs() > 0.999_999_999);
    let mut prev = 1.0 + 1e-12;
    for i in 0..40 {
        let theta = 0.25 * i as f64;
        let r = entrance_rhs(&flow, ubar, 1.0, theta).unwrap();
        assert!(r <= prev);
        // Exponential entrance mass for Feller: 1/(1 + theta).
        assert!((r - 1.0 / (1.0 + theta)).abs() < 1e-8);
        prev = r;
    }
    let checks = entrance_law_check(&mech, 1.0, &[0.0, 1.0], 4000, 3).unwrap();
    assert_eq!(checks[0].lhs, 1.0);
    assert_eq!(checks[0].z, 0.0);
    assert!(checks[1].z.abs() < 4.0);
}

#[test]
fn carleman_proxy_decreases() {
    for a in [1.0, 2.0, 8.0] {
        let mech = BranchingMechanism::cutoff_lebesgue(a, 1.5).unwrap();
        let r = carleman_ratios(&mech, 4..=12);
        assert!(r.windows(2).all(|w| w[1].1 < w[0].1), "A={a}: {r:?}");
    }
}
