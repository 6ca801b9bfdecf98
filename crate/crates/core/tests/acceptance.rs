//! Acceptance suite: one PASS/FAIL line per criterion, with its runtime budget.
//!
//! Run with `cargo test --release --test acceptance`. The target exits non-zero
//! if any criterion other than the size-tail trend (14) fails; criterion 14 is
//! reported honestly either way.

use std::f64::consts::PI;
use std::time::Instant;

use rand::Rng;

use branchlab::csbp::{shape_bound_ratio, BranchingMechanism, LaplaceFlow};
use branchlab::harness::{run_experiment, size_tail_trend, ExperimentSpec, Kind, Report, SizeTailConfig};
use branchlab::rng::stream;
use branchlab::spectral::{solve_slp, verify_v1_tail, Potential};
use branchlab::ultrametric::{Composition, Matrix, PlanarUltrametricMatrix};

/// Criteria whose failure is documented as expected at desk scale.
const MAY_FAIL: &[u32] = &[14];

struct Outcome {
    id: u32,
    pass: bool,
}

fn report(id: u32, title: &str, budget_s: f64, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (ok, detail) = f();
    let secs = start.elapsed().as_secs_f64();
    let in_time = secs < budget_s;
    let pass = ok && in_time;
    let timing = if in_time { format!("{secs:.1} s of {budget_s} s") } else { format!("{secs:.1} s, over the {budget_s} s budget") };
    println!("{} {:>2} {title}: {detail} [{timing}]", if pass { "PASS" } else { "FAIL" }, id);
    Outcome { id, pass }
}

/// Statistical rows must satisfy |z| <= 3, tolerance rows |z| <= 1.
fn judge(r: &Report) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for rec in &r.records {
        let limit = match rec.kind {
            Kind::Statistical => 3.0,
            Kind::Tolerance => 1.0,
        };
        let good = rec.z.abs() <= limit && !rec.note.starts_with("insufficient");
        ok &= good;
        let z = match rec.kind {
            Kind::Statistical => format!("z={:+.2}", rec.z),
            Kind::Tolerance => format!("dev={:+.2} tol", rec.z),
        };
        parts.push(format!("{} {:.6} vs {:.6} ({z}){}", rec.label, rec.lhs, rec.rhs, if good { "" } else { " <-" }));
    }
    (ok, parts.join("; "))
}

fn experiment(name: &str, replicates: Option<u64>, seed: u64) -> (bool, String) {
    let mut spec = ExperimentSpec::new(name).unwrap().with_seed(seed);
    if let Some(n) = replicates {
        spec = spec.with_replicates(n);
    }
    match run_experiment(&spec) {
        Ok(r) => judge(&r),
        Err(e) => (false, format!("error: {e}")),
    }
}

fn criterion_1() -> (bool, String) {
    let l = 10.0;
    let sol = solve_slp(&Potential::Zero, l, 1e-12).unwrap();
    let dl = (sol.lambda1 + PI * PI / 200.0).abs();
    let sup = sol
        .v1
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let x = i as f64 * sol.h;
            (v - (PI * x / l).sin() / (PI / l).sin()).abs()
        })
        .fold(0.0, f64::max);
    (dl < 1e-8 && sup < 1e-6, format!("|lambda_1 + pi^2/200| = {dl:.2e}, sup |v_1 - sine| = {sup:.2e}"))
}

fn criterion_2() -> (bool, String) {
    let sol = solve_slp(&Potential::step(4.0), 20.0, 1e-12).unwrap();
    let d = verify_v1_tail(&sol).unwrap();
    (d < 1e-6, format!("sup over [1, L] of |v_1 - sinh form| = {d:.2e}"))
}

fn criterion_4() -> (bool, String) {
    let flow = LaplaceFlow::new(&BranchingMechanism::alpha_stable(1.0, 1.5).unwrap()).unwrap();
    let u = flow.laplace_exponent(1.0, 1.0).unwrap();
    let ubar = flow.grey_ubar(1.0).unwrap();
    let (du, db) = ((u - 4.0 / 9.0).abs(), (ubar - 4.0).abs());
    (du < 1e-6 && db < 1e-5, format!("|u_1(1) - 4/9| = {du:.2e}, |ubar_1 - 4| = {db:.2e}"))
}

fn criterion_12() -> (bool, String) {
    let mut worst: f64 = 0.0;
    for r in [1.0, 2.0, 5.0] {
        for u1 in [0.5, 1.0, 2.0] {
            worst = worst.max(shape_bound_ratio(u1, r, 12));
        }
    }
    (worst <= 1.0, format!("max u_k / (u_1^k R^(k-1) 4^k) = {worst:.4}"))
}

fn brute_planar(m: &Matrix) -> bool {
    let k = m.k();
    (0..k).all(|i| (i + 1..k).all(|j| (i + 1..j).all(|l| m.get(i, j) == m.get(i, l).max(m.get(l, j)))))
}

/// Round trip, block structure and reconstruction at the root level.
fn identities_hold(u: &PlanarUltrametricMatrix) -> bool {
    let tau = u.tau();
    let (c, subs, blocks) = u.decompose_at(tau);
    let Ok(back) = PlanarUltrametricMatrix::reconstruct(tau, &c, &subs) else { return false };
    if back.matrix() != u.matrix() {
        return false;
    }
    let from_depths = PlanarUltrametricMatrix::from_depths(&u.depths());
    if !from_depths.is_ok_and(|d| d.matrix() == u.matrix()) {
        return false;
    }
    let consecutive = blocks.iter().flatten().copied().eq(0..u.k());
    let k = u.k();
    let extremes = u.decompose_at(0.0).0 == Composition(vec![1; k]) && u.decompose_at(tau + 1.0).0 == Composition(vec![k]);
    consecutive && extremes
}

fn criterion_13() -> (bool, String) {
    let vals = [0.0, 1.0, 2.0, 3.0];
    let mut exhaustive = 0usize;
    let mut bad = 0usize;
    for k in 1..=4usize {
        let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
        for mut code in 0..vals.len().pow(pairs.len() as u32) {
            let mut m = Matrix::zeros(k);
            for &(i, j) in &pairs {
                let v = vals[code % 4];
                code /= 4;
                m.set(i, j, v);
                m.set(j, i, v);
            }
            exhaustive += 1;
            let res = PlanarUltrametricMatrix::validate(m.clone());
            if res.is_ok() != brute_planar(&m) {
                bad += 1;
                continue;
            }
            if let Ok(u) = res {
                if !identities_hold(&u) {
                    bad += 1;
                }
            }
        }
    }
    let mut rng = stream(13, "acceptance-ultrametric", 0);
    let randomized = 10_000;
    for _ in 0..randomized {
        let k = rng.random_range(1..=8usize);
        let depths: Vec<f64> = (0..k - 1).map(|_| if rng.random::<bool>() { rng.random_range(0..4) as f64 } else { rng.random::<f64>() * 3.0 }).collect();
        match PlanarUltrametricMatrix::from_depths(&depths) {
            Ok(u) if brute_planar(u.matrix()) && identities_hold(&u) => {}
            _ => bad += 1,
        }
    }
    (bad == 0, format!("{exhaustive} exhaustive and {randomized} randomized cases, {bad} failures"))
}

fn criterion_14() -> (bool, String) {
    let cfg = SizeTailConfig {
        alpha: 1.8,
        edge: 1.0,
        a: 1.0,
        t: 0.1,
        x0: 1.0,
        z0: 0.01,
        ns: vec![1e2, 1e3, 1e4],
        replicates: 200_000,
        min_survivors: 10,
    };
    match size_tail_trend(&cfg, 14) {
        Ok(r) => {
            let dev = (r.slope + r.gamma).abs() / r.gamma;
            let rows: Vec<String> = r.rows.iter().map(|row| format!("N={:.0}: P={:.3e} ({} hits)", row.n, row.p, row.hits)).collect();
            let monotone = r.rows.iter().all(|row| row.p_by_level.windows(2).all(|w| w[1].1 <= w[0].1));
            let ok = !r.insufficient && dev <= 0.25 && monotone;
            let flag = if r.insufficient { ", insufficient statistics" } else { "" };
            (
                ok,
                format!(
                    "slope {:.3} +- {:.3} vs -gamma = {:.3} (relative deviation {:.1}%, tolerance 25%){flag}; {}; mass tail slope {:.2}",
                    r.slope,
                    r.slope_se,
                    -r.gamma,
                    100.0 * dev,
                    rows.join(", "),
                    r.mass_tail_slope
                ),
            )
        }
        Err(e) => (false, format!("error: {e}")),
    }
}

fn main() {
    let mut out = Vec::new();
    out.push(report(1, "spectral closed form", 1.0, criterion_1));
    out.push(report(2, "eigenfunction tail", 5.0, criterion_2));
    out.push(report(3, "gap scaling", 30.0, || experiment("spectral-gap", None, 3)));
    out.push(report(4, "CSBP Laplace flow", 1.0, criterion_4));
    out.push(report(5, "reduced-process martingale", 120.0, || experiment("reduced-martingale", Some(100_000), 5)));
    out.push(report(6, "moment-recursion oracle", 180.0, || experiment("csbp-moment-oracle", Some(100_000), 6)));
    out.push(report(7, "entrance-law Laplace identity", 120.0, || experiment("entrance-law", Some(100_000), 7)));
    out.push(report(8, "many-to-few k=1", 300.0, || experiment("many-to-few-k1", Some(100_000), 8)));
    out.push(report(9, "many-to-few k=2 cross-oracle", 900.0, || experiment("many-to-few-k2", Some(100_000), 9)));
    out.push(report(10, "reversed martingale and Green function", 300.0, || experiment("reversed-martingale", None, 10)));
    out.push(report(11, "jump-moment A-scaling", 600.0, || experiment("jump-moment-scaling", None, 11)));
    out.push(report(12, "combinatorial shape bound", 1.0, criterion_12));
    out.push(report(13, "ultrametric suite", 10.0, criterion_13));
    out.push(report(14, "size-tail trend", 3600.0, criterion_14));
    let passed = out.iter().filter(|o| o.pass).count();
    println!("acceptance: {passed}/{} criteria pass", out.len());
    let unexpected: Vec<u32> = out.iter().filter(|o| !o.pass && !MAY_FAIL.contains(&o.id)).map(|o| o.id).collect();
    if !unexpected.is_empty() {
        eprintln!("criteria failed: {unexpected:?}");
        std::process::exit(1);
    }
}
