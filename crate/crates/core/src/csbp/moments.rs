use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::functional::{Functional, ProductFunctional};
use crate::quad::{cumulative_simpson, GaussLegendre};
use crate::rng::stream;
use crate::stats::Accumulator;
use crate::ultrametric::{Composition, Matrix, PlanarUltrametricMatrix};

use super::flow::LaplaceFlow;
use super::mechanism::BranchingMechanism;
use super::reduced::{default_probe, reduced_count, ReducedRates};

/// Intervals of the shared time grid used by the moment recursion.
pub const MOMENT_GRID: usize = 512;

/// Largest `k` accepted by the permutation sums and the shape enumeration.
pub const MAX_PLANAR_K: usize = 8;

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Evaluator for `Mhat^{k,s}[G]` on the grid `s_j = j t / MOMENT_GRID`.
struct MomentGrid<'a> {
    mech: &'a BranchingMechanism,
    h: f64,
    s: Vec<f64>,
    /// `Mhat^{k,s}[1]` on the grid, keyed by `k`.
    ones: HashMap<usize, Vec<f64>>,
}

impl<'a> MomentGrid<'a> {
    fn new(mech: &'a BranchingMechanism, t: f64) -> Self {
        let h = t / MOMENT_GRID as f64;
        let s = (0..=MOMENT_GRID).map(|j| j as f64 * h).collect();
        Self { mech, h, s, ones: HashMap::new() }
    }

    /// `y(s) e^{-b s}`-weighted running integral:
    /// `out_j = (m_p/p!) int_0^{s_j} e^{-b(s_j - u)} y(u) du`.
    fn branch(&self, p: usize, y: &[f64]) -> Vec<f64> {
        let b = self.mech.b;
        let coef = self.mech.jump_moment(p as u32) / factorial(p);
        let weighted: Vec<f64> = y.iter().zip(&self.s).map(|(v, s)| v * (b * s).exp()).collect();
        let cum = cumulative_simpson(&weighted, self.h);
        cum.iter().zip(&self.s).map(|(c, s)| coef * (-b * s).exp() * c).collect()
    }

    fn ones(&mut self, k: usize) -> Vec<f64> {
        if let Some(v) = self.ones.get(&k) {
            return v.clone();
        }
        let b = self.mech.b;
        let out = if k == 1 {
            self.s.iter().map(|s| (-b * s).exp()).collect()
        } else {
            let mut acc = vec![0.0; self.s.len()];
            for c in Composition::all(k) {
                if c.len() < 2 {
                    continue;
                }
                let mut y = vec![1.0; self.s.len()];
                for &p in c.parts() {
                    let child = self.ones(p);
                    for (a, v) in y.iter_mut().zip(&child) {
                        *a *= v;
                    }
                }
                for (a, v) in acc.iter_mut().zip(self.branch(c.len(), &y)) {
                    *a += v;
                }
            }
            acc
        };
        self.ones.insert(k, out.clone());
        out
    }

    fn eval(&mut self, g: &Functional) -> Result<Vec<f64>> {
        match g {
            Functional::Constant { k, value } => Ok(self.ones(*k).into_iter().map(|v| value * v).collect()),
            Functional::Leaf(_) => Err(Error::UnsupportedFunctional("mark functions have no meaning for CSBP genealogies".into())),
            Functional::Product(p) => self.eval_product(p),
        }
    }

    fn eval_product(&mut self, p: &ProductFunctional) -> Result<Vec<f64>> {
        if p.epsilon > 0.0 {
            return Err(Error::UnsupportedFunctional(format!("epsilon = {} > 0; the gap is a BBM-side construct", p.epsilon)));
        }
        if p.composition.len() < 2 {
            // A single block at the root level never occurs: the root split has at least two children.
            return Ok(vec![0.0; self.s.len()]);
        }
        let mut y: Vec<f64> = self.s.iter().map(|&s| p.depth.eval(s)).collect();
        for ch in &p.children {
            let v = self.eval(ch)?;
            for (a, b) in y.iter_mut().zip(&v) {
                *a *= b;
            }
        }
        Ok(self.branch(p.composition.len(), &y))
    }
}

fn check_moments(mech: &BranchingMechanism) -> Result<()> {
    if !mech.has_all_moments() {
        return Err(Error::UnsupportedFunctional("the moment recursion needs a jump measure with all moments".into()));
    }
    Ok(())
}

/// `Mhat^{k,t}[G]` by the moment recursion on a shared Simpson grid.
pub fn csbp_moments(mech: &BranchingMechanism, k: usize, t: f64, g: &Functional) -> Result<f64> {
    check_moments(mech)?;
    if !(t > 0.0) {
        return Err(Error::Invalid(format!("t must be positive, got {t}")));
    }
    if g.k() != k {
        return Err(Error::Shape(format!("functional accepts {} leaves, asked for k = {k}", g.k())));
    }
    if g.max_epsilon() > 0.0 {
        return Err(Error::UnsupportedFunctional(format!("epsilon = {} > 0; the gap is a BBM-side construct", g.max_epsilon())));
    }
    let mut grid = MomentGrid::new(mech, t);
    Ok(*grid.eval(g)?.last().expect("non-empty grid"))
}

/// `Mhat^{k,t}[1]` for `s` on the grid, returned as `(s, value)` pairs.
pub fn csbp_moment_curve(mech: &BranchingMechanism, k: usize, t: f64) -> Result<Vec<(f64, f64)>> {
    check_moments(mech)?;
    let mut grid = MomentGrid::new(mech, t);
    let v = grid.ones(k);
    Ok(grid.s.iter().copied().zip(v).collect())
}

/// Quadrature points `(U, weight)` of the planar measure `Mhat^{k,t}`, obtained by
/// nesting an `n`-point Gauss-Legendre rule over every internal branch time.
pub fn planar_measure_points(mech: &BranchingMechanism, k: usize, t: f64, n: usize) -> Result<Vec<(PlanarUltrametricMatrix, f64)>> {
    check_moments(mech)?;
    if k == 0 {
        return Err(Error::Invalid("k must be positive".into()));
    }
    if k > MAX_PLANAR_K {
        return Err(Error::TooManyLeaves(k));
    }
    let rule = GaussLegendre::new(n);
    Ok(points_rec(mech, k, t, &rule))
}

fn points_rec(mech: &BranchingMechanism, k: usize, t: f64, rule: &GaussLegendre) -> Vec<(PlanarUltrametricMatrix, f64)> {
    if k == 1 {
        let one = PlanarUltrametricMatrix::validate(Matrix::zeros(1)).expect("1x1 zero matrix");
        return vec![(one, (-mech.b * t).exp())];
    }
    let mut out = Vec::new();
    for c in Composition::all(k) {
        let p = c.len();
        if p < 2 {
            continue;
        }
        let coef = mech.jump_moment(p as u32) / factorial(p);
        if coef == 0.0 {
            continue;
        }
        for (s, w) in rule.points(0.0, t) {
            let base = coef * w * (-mech.b * (t - s)).exp();
            let children: Vec<Vec<(PlanarUltrametricMatrix, f64)>> = c.parts().iter().map(|&q| points_rec(mech, q, s, rule)).collect();
            // Cartesian product of the child point sets.
            let mut combos: Vec<(Vec<PlanarUltrametricMatrix>, f64)> = vec![(Vec::new(), base)];
            for ch in &children {
                let mut next = Vec::with_capacity(combos.len() * ch.len());
                for (subs, wt) in &combos {
                    for (m, wm) in ch {
                        let mut s2 = subs.clone();
                        s2.push(m.clone());
                        next.push((s2, wt * wm));
                    }
                }
                combos = next;
            }
            for (subs, wt) in combos {
                let u = PlanarUltrametricMatrix::reconstruct(s, &c, &subs).expect("children lie strictly below the root level");
                out.push((u, wt));
            }
        }
    }
    out
}

/// `sum_P M^{k,t}[G o P]` over all `k!` permutations, with `M = Mhat / ubar_t`.
/// `g` is any functional of a (not necessarily planar) `k x k` matrix.
pub fn unplanarize<G: Fn(&Matrix) -> f64>(mech: &BranchingMechanism, k: usize, t: f64, g: G) -> Result<f64> {
    if k > MAX_PLANAR_K {
        return Err(Error::TooManyLeaves(k));
    }
    let flow = LaplaceFlow::new(mech)?;
    let ubar = flow.ubar(t)?;
    let n = match k {
        1..=3 => 16,
        4 => 10,
        5 => 6,
        _ => 3,
    };
    let pts = planar_measure_points(mech, k, t, n)?;
    let perms = permutations(k);
    let mut total = 0.0;
    for (u, w) in &pts {
        for p in &perms {
            total += w * g(&u.permute(p)?);
        }
    }
    Ok(total / ubar)
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    heap_permute(k, &mut cur, &mut out);
    out
}

fn heap_permute(n: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if n <= 1 {
        out.push(a.clone());
        return;
    }
    for i in 0..n - 1 {
        heap_permute(n - 1, a, out);
        if n % 2 == 0 {
            a.swap(i, n - 1);
        } else {
            a.swap(0, n - 1);
        }
    }
    heap_permute(n - 1, a, out);
}

/// Monte Carlo of the off-diagonal mass `(e^{bt}/ubar_t)^2 sum_{v != w} theta_v theta_w`
/// of the weighted genealogy, with leaves and weights taken at the probe time.
pub fn offdiagonal_mass_mc(mech: &BranchingMechanism, t: f64, n: usize, seed: u64) -> Result<Accumulator> {
    let flow = LaplaceFlow::new(mech)?;
    let rates = ReducedRates::new(&flow, t)?;
    let probe = default_probe(t);
    let c = rates.compensation(probe);
    let scale = (mech.b * t).exp() / flow.ubar(t)?;
    let samples: Result<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, "csbp-offdiagonal", i as u64);
            let z = reduced_count(&rates, probe, &mut rng)? as f64;
            Ok((scale * c).powi(2) * z * (z - 1.0))
        })
        .collect();
    Ok(Accumulator::from_slice(&samples?))
}

/// Result of the entrance-law Laplace check.
#[derive(Clone, Debug, Serialize)]
pub struct EntranceCheck {
    pub theta: f64,
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub z: f64,
}

/// `E[exp(-theta W_t)]` by simulation against `1 - u_t(theta ubar_t e^{bt}) / ubar_t`.
pub fn entrance_law_check(mech: &BranchingMechanism, t: f64, thetas: &[f64], n: usize, seed: u64) -> Result<Vec<EntranceCheck>> {
    let flow = LaplaceFlow::new(mech)?;
    let ubar = flow.grey_ubar(t)?;
    let rates = ReducedRates::new(&flow, t)?;
    let probe = default_probe(t);
    let c = rates.compensation(probe);
    let ws: Result<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, "csbp-entrance", i as u64);
            Ok(c * reduced_count(&rates, probe, &mut rng)? as f64)
        })
        .collect();
    let ws = ws?;
    thetas
        .iter()
        .map(|&theta| {
            let acc = Accumulator::from_slice(&ws.iter().map(|w| (-theta * w).exp()).collect::<Vec<_>>());
            let rhs = entrance_rhs(&flow, ubar, t, theta)?;
            let se = acc.stderr();
            let z = if se > 0.0 { (acc.mean - rhs) / se } else if (acc.mean - rhs).abs() < 1e-12 { 0.0 } else { f64::INFINITY };
            Ok(EntranceCheck { theta, lhs: acc.mean, lhs_se: se, rhs, z })
        })
        .collect()
}

/// `1 - u_t(theta ubar_t e^{bt}) / ubar_t`.
pub fn entrance_rhs(flow: &LaplaceFlow, ubar: f64, t: f64, theta: f64) -> Result<f64> {
    Ok(1.0 - flow.laplace_exponent(theta * ubar * (flow.mech.b * t).exp(), t)? / ubar)
}

/// Sequence `u_k = R sum_{i=1}^{k-1} u_i u_{k-i}` from `u_1`.
pub fn shape_sequence(u1: f64, r: f64, kmax: usize) -> Vec<f64> {
    let mut u = vec![0.0; kmax + 1];
    if kmax >= 1 {
        u[1] = u1;
    }
    for k in 2..=kmax {
        u[k] = r * (1..k).map(|i| u[i] * u[k - i]).sum::<f64>();
    }
    u
}

/// Checks `u_k <= u_1^k R^{k-1} 4^k` for `k <= kmax`; returns the worst ratio.
pub fn shape_bound_ratio(u1: f64, r: f64, kmax: usize) -> f64 {
    let u = shape_sequence(u1, r, kmax);
    (1..=kmax)
        .map(|k| u[k] / (u1.powi(k as i32) * r.powi(k as i32 - 1) * 4f64.powi(k as i32)))
        .fold(0.0, f64::max)
}

/// `m_k^{1/k} / k` for `k` in `ks`.
pub fn carleman_ratios(mech: &BranchingMechanism, ks: std::ops::RangeInclusive<u32>) -> Vec<(u32, f64)> {
    ks.map(|k| (k, mech.jump_moment(k).powf(1.0 / k as f64) / k as f64)).collect()
}
