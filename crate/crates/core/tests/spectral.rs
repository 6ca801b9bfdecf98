use branchlab::spectral::*;
use nalgebra::{DMatrix, SymmetricEigen};
use std::f64::consts::PI;

/// Root of `q cot q = -sqrt(2 lam) coth(sqrt(2 lam) (L - 1))`, `q = sqrt(B - 2 lam)`,
/// found by plain bisection on the largest bracket below `B / 2`.
fn matching_root(b: f64, l: f64) -> f64 {
    let f = |lam: f64| {
        let q = (b - 2.0 * lam).sqrt();
        let k = (2.0 * lam).sqrt();
        q / q.tan() + k / (k * (l - 1.0)).tanh()
    };
    // Principal root: q in (pi/2, pi), lam in ((B - pi^2)/2, (B - pi^2/4)/2).
    let mut lo = ((b - PI * PI) / 2.0).max(1e-12) + 1e-12;
    let mut hi = (b - PI * PI / 4.0) / 2.0;
    assert!(f(lo).signum() != f(hi).signum());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid).signum() == f(lo).signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Largest eigenvalue of the dense second-order finite-difference matrix of
/// `1/2 d^2 + 1/2 W` with Dirichlet conditions, cell-averaged W.
fn fd_eigen(b: f64, l: f64, n: usize) -> f64 {
    let h = l / n as f64;
    let m = n - 1;
    let mut a = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        let x = (i + 1) as f64 * h;
        let w = if x + 0.5 * h <= 1.0 {
            b
        } else if x - 0.5 * h >= 1.0 {
            0.0
        } else {
            b * (1.0 - (x - 0.5 * h)) / h
        };
        a[(i, i)] = -1.0 / (h * h) + 0.5 * w;
        if i + 1 < m {
            a[(i, i + 1)] = 0.5 / (h * h);
            a[(i + 1, i)] = 0.5 / (h * h);
        }
    }
    let eig = SymmetricEigen::new(a);
    eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn step_eigenvalue_matches_matching_condition() {
    let sol = solve_slp(&Potential::step(4.0), 20.0, 1e-10).unwrap();
    let oracle = matching_root(4.0, 20.0);
    assert!((sol.lambda1 - oracle).abs() < 1e-11, "{} vs {}", sol.lambda1, oracle);
}

#[test]
fn step_eigenvalue_matches_finite_difference_oracle() {
    let sol = solve_slp(&Potential::step(4.0), 20.0, 1e-10).unwrap();
    // Richardson extrapolation of the O(h^2) finite-difference eigenvalue.
    let e1 = fd_eigen(4.0, 20.0, 400);
    let e2 = fd_eigen(4.0, 20.0, 800);
    let extrap = (4.0 * e2 - e1) / 3.0;
    assert!((sol.lambda1 - extrap).abs() < 2e-5, "{} vs {extrap} ({e1}, {e2})", sol.lambda1);
}

#[test]
fn step_tail_is_sinh_form() {
    let sol = solve_slp(&Potential::step(4.0), 20.0, 1e-10).unwrap();
    let err = verify_v1_tail(&sol).unwrap();
    assert!(err < 1e-6, "tail error {err}");
    assert!((sol.v1_at(1.0).0 - 1.0).abs() < 1e-15);
    assert!(sol.v1_at(20.0).0.abs() < 1e-9);
    assert!(matches!(verify_v1_tail(&solve_slp(&Potential::Zero, 5.0, 1e-8).unwrap()), Err(branchlab::Error::Regime(_))));
}

#[test]
fn ode_residual_and_positivity() {
    for (pot, l) in [(Potential::Zero, 10.0), (Potential::step(4.0), 20.0), (Potential::step(2.8), 12.0)] {
        let tol = 1e-10;
        let sol = solve_slp(&pot, l, tol).unwrap();
        assert!(sol.ode_residual() < 10.0 * tol, "{pot:?}: residual {}", sol.ode_residual());
        assert_eq!(sol.sign_changes(), 0);
        assert!(sol.v1[1..sol.n()].iter().all(|&v| v > 0.0));
        assert_eq!(sol.v1[0], 0.0);
    }
}

#[test]
fn tabulated_smooth_potential_residual() {
    let xs: Vec<f64> = (0..=50).map(|i| i as f64 / 50.0).collect();
    let ws: Vec<f64> = xs.iter().map(|x| 3.0 * (PI * x).sin().powi(2)).collect();
    let sol = solve_slp(&Potential::Tabulated { xs, ws }, 10.0, 1e-9).unwrap();
    assert!(sol.ode_residual() < 1e-6, "residual {}", sol.ode_residual());
    assert_eq!(sol.sign_changes(), 0);
}

#[test]
fn harmonic_pair_normalizations() {
    for (pot, l) in [(Potential::Zero, 7.0), (Potential::step(4.0), 15.0)] {
        let sol = solve_slp(&pot, l, 1e-10).unwrap();
        let hp = harmonic_pair(&sol, sol.mu).unwrap();
        let ht = sol.integrate(|x, _, _| sol.h_tilde_at(x));
        let pi = sol.integrate(|x, _, _| sol.pi_at(x));
        let pair = sol.integrate(|x, _, _| sol.h_tilde_at(x) * sol.h_at(x));
        assert!((ht - 1.0).abs() < 1e-10, "int h~ = {ht}");
        assert!((pi - 1.0).abs() < 1e-10, "int Pi = {pi}");
        assert!((pair - 1.0).abs() < 1e-10, "<h~, h> = {pair}");
        assert!((hp.c_l - sol.c_l).abs() < 1e-12 * sol.c_l);
        for i in (0..hp.x.len()).step_by(97) {
            assert!((hp.h[i] * hp.h_tilde[i] - hp.pi[i]).abs() < 1e-10 * (1.0 + hp.pi[i]));
        }
    }
}

#[test]
fn zero_potential_pi_is_sine_squared() {
    for &l in &[3.0, 10.0] {
        let sol = solve_slp(&Potential::Zero, l, 1e-10).unwrap();
        let hp = harmonic_pair(&sol, sol.mu).unwrap();
        for (x, p) in hp.x.iter().zip(&hp.pi) {
            let e = 2.0 / l * (PI * x / l).sin().powi(2);
            assert!((p - e).abs() < 1e-10, "x={x}: {p} vs {e}");
        }
    }
}

#[test]
fn zero_potential_eigenvalue_increases_with_length() {
    let mut prev = f64::NEG_INFINITY;
    for &l in &[2.0, 3.0, 5.0, 8.0, 13.0] {
        let lam = solve_slp(&Potential::Zero, l, 1e-10).unwrap().lambda1;
        assert!(lam > prev);
        assert!((lam + PI * PI / (2.0 * l * l)).abs() < 1e-12);
        prev = lam;
    }
}

#[test]
fn gap_scaling_rate_for_pushed_step() {
    let g = gap_scaling(&Potential::step(4.0), &[10.0, 14.0, 18.0, 22.0]).unwrap();
    assert!(g.w.iter().all(|&w| w > 0.0));
    assert!(g.relative_error() < 0.1, "slope {} vs {}", g.slope, -2.0 * g.beta);
    assert!(matches!(gap_scaling(&Potential::Zero, &[2.0, 3.0, 4.0, 5.0]), Err(branchlab::Error::Regime(_))));
    assert!(gap_scaling(&Potential::step(4.0), &[10.0, 14.0, 18.0]).is_err());
}

#[test]
fn half_line_limit_matches_long_domain() {
    let pot = Potential::step(3.0);
    let lim = LimitSolution::new(&pot).unwrap();
    let long = solve_slp(&pot, 60.0, 1e-12).unwrap();
    assert!((lim.lambda_inf - long.lambda1).abs() < 1e-12);
    // Norm and c_inf of the half-line eigenfunction against the long domain.
    assert!((lim.v_sq_norm - long.v1_sq_norm()).abs() < 1e-8);
    assert!((lim.c_inf - long.c_l).abs() < 1e-8 * lim.c_inf);
}

#[test]
fn fundamental_solutions_limits() {
    let sol = solve_slp(&Potential::step(4.0), 12.0, 1e-10).unwrap();
    let sq = sol.v1_sq_norm();
    let mut prev_ratio_err = f64::INFINITY;
    for &xi in &[1e-2, 1e-3, 1e-4] {
        let fs = fundamental_solutions(&sol, xi).unwrap();
        assert_eq!(fs.d_at(sol.l).0, 0.0);
        let mut worst: f64 = 0.0;
        for i in 0..=60 {
            let x = i as f64 * sol.l / 120.0;
            let v = sol.v1_at(x).0;
            worst = worst.max((fs.g_at(x).0 - v).abs()).max((fs.d_at(x).0 - v).abs());
        }
        assert!(worst < 5.0 * xi * sol.l, "xi={xi}: {worst}");
        let ratio_err = (fs.wronskian / (xi + sol.w) - sq).abs();
        assert!(ratio_err < 5.0 * xi * sol.l * sq, "xi={xi}");
        assert!(ratio_err < prev_ratio_err);
        prev_ratio_err = ratio_err;
    }
}

#[test]
fn green_function_boundary_and_symmetry() {
    let sol = solve_slp(&Potential::step(4.0), 10.0, 1e-10).unwrap();
    let g = GreenFunction::new(&sol, 0.05).unwrap();
    for &x in &[0.3, 2.0, 7.5] {
        assert!(g.eval(x, 10.0).unwrap().abs() < 1e-12);
    }
    for &(x, y) in &[(0.4, 3.0), (1.5, 8.0), (5.0, 5.5), (0.9, 1.1)] {
        let a = sol.v1_at(x).0 * g.eval(x, y).unwrap() / sol.v1_at(y).0;
        let b = sol.v1_at(y).0 * g.eval(y, x).unwrap() / sol.v1_at(x).0;
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
    }
    assert!(matches!(g.eval(0.0, 1.0), Err(branchlab::Error::SingularArgument(_))));
    assert!(matches!(g.eval(10.0, 1.0), Err(branchlab::Error::SingularArgument(_))));
}

#[test]
fn green_function_matches_eigen_expansion_for_zero_potential() {
    let l = 5.0;
    let sol = solve_slp(&Potential::Zero, l, 1e-10).unwrap();
    let xi = 0.3;
    let g = GreenFunction::new(&sol, xi).unwrap();
    let lam1 = -PI * PI / (2.0 * l * l);
    for &(x, y) in &[(1.0, 2.0), (2.5, 2.5), (4.0, 0.5)] {
        let mut s = 0.0;
        for n in 1..200_000 {
            let nf = n as f64;
            let lam_n = -nf * nf * PI * PI / (2.0 * l * l);
            s += (nf * PI * x / l).sin() * (nf * PI * y / l).sin() / (xi + lam1 - lam_n);
        }
        let expect = (PI * y / l).sin() / (PI * x / l).sin() * 2.0 / l * s;
        let got = g.eval(x, y).unwrap();
        assert!((got - expect).abs() < 1e-5 * expect.abs(), "({x},{y}): {got} vs {expect}");
    }
}

#[test]
fn cutoff_geometry_consistency() {
    let pot = Potential::step_for_alpha(1.5, 1.0).unwrap();
    let lim = LimitSolution::new(&pot).unwrap();
    let geo = CutoffGeometry::new(&lim, 1e3, 2.0, 0.2).unwrap();
    assert!((geo.epsilon - geo.epsilon_alt()).abs() < 1e-12 * geo.epsilon);
    assert!(geo.delta2 > 0.0 && geo.gamma > 1.0);
    assert!((geo.gamma - 2.0).abs() < 1e-9);
    let n_back = CutoffGeometry::n_for_length(&lim, geo.l_na, 2.0);
    assert!((n_back / 1e3 - 1.0).abs() < 1e-10);
    assert!(CutoffGeometry::new(&LimitSolution::new(&Potential::step(4.0)).unwrap(), 1e3, 1.0, 0.2).is_err());
}
