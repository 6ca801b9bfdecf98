use rand::Rng;
use rand_distr::{Distribution, Poisson};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::quad::{brent, gl16};
use crate::ultrametric::PlanarUltrametricMatrix;

use super::flow::LaplaceFlow;
use super::mechanism::{g_split, g_split_mean, JumpLaw};

/// Number of nodes on the log-spaced time-to-horizon grid.
pub const TAU_GRID: usize = 1024;

/// Default node cap for a single reduced tree.
pub const NODE_CAP: usize = 5_000_000;

/// Offspring law of the reduced process at a split.
#[derive(Clone, Debug)]
enum OffspringLaw {
    /// Diffusive splits only: always two children.
    Binary,
    /// Stable jumps, optionally mixed with binary splits.
    Stable { c: f64, alpha: f64 },
    /// Jumps drawn from a mixture of conditioned Poisson laws.
    Mixture(JumpLaw),
}

/// Rates of the reduced process for horizon `t`, indexed by the time to horizon `tau`.
///
/// `r_tau = psi'(ubar_tau) - psi(ubar_tau)/ubar_tau` is the total split rate and
/// `m_tau = psi(ubar_tau)/ubar_tau - b` the growth rate compensated by the
/// martingale `W_{s,t}`. Cumulative integrals of both are tabulated on a
/// log-spaced grid and interpolated by cubic Hermite polynomials in `ln tau`.
#[derive(Clone, Debug)]
pub struct ReducedRates {
    pub flow: LaplaceFlow,
    pub t: f64,
    pub tau_min: f64,
    y0: f64,
    dy: f64,
    ln_ubar: Vec<f64>,
    /// `tau * r_tau`, the derivative of the cumulative hazard in `ln tau`.
    rho_r: Vec<f64>,
    big_r: Vec<f64>,
    rho_m: Vec<f64>,
    big_m: Vec<f64>,
    law: OffspringLaw,
    /// For `b = 0` and a pure power-law mechanism, `r_tau = 1/tau` exactly.
    exact_inverse_tau: bool,
}

impl ReducedRates {
    pub fn new(flow: &LaplaceFlow, t: f64) -> Result<Self> {
        Self::with_tau_min(flow, t, t * 1e-7)
    }

    pub fn with_tau_min(flow: &LaplaceFlow, t: f64, tau_min: f64) -> Result<Self> {
        flow.grey_check()?;
        if !(t > 0.0) || !(tau_min > 0.0 && tau_min < t) {
            return Err(Error::Invalid(format!("reduced rates need 0 < tau_min < t (got {tau_min}, {t})")));
        }
        let mech = &flow.mech;
        let law = match mech.law() {
            JumpLaw::None => OffspringLaw::Binary,
            JumpLaw::Stable { c, alpha } => OffspringLaw::Stable { c, alpha },
            other => OffspringLaw::Mixture(other),
        };
        let y0 = tau_min.ln();
        let dy = (t.ln() - y0) / (TAU_GRID - 1) as f64;
        let mut ln_ubar = Vec::with_capacity(TAU_GRID);
        let mut rho_r = Vec::with_capacity(TAU_GRID);
        let mut rho_m = Vec::with_capacity(TAU_GRID);
        let rho = |y: f64| -> Result<(f64, f64, f64)> {
            let tau = y.exp();
            let u = flow.ubar(tau)?;
            let psi = mech.psi_unchecked(u);
            let r = mech.psi_prime(u) - psi / u;
            let m = psi / u - mech.b;
            Ok((u, tau * r, tau * m))
        };
        for j in 0..TAU_GRID {
            let (u, rr, rm) = rho(y0 + j as f64 * dy)?;
            ln_ubar.push(u.ln());
            rho_r.push(rr);
            rho_m.push(rm);
        }
        let mut big_r = vec![0.0; TAU_GRID];
        let mut big_m = vec![0.0; TAU_GRID];
        let rule = gl16();
        for j in 1..TAU_GRID {
            let a = y0 + (j - 1) as f64 * dy;
            let mut err = None;
            let mut ir = 0.0;
            let mut im = 0.0;
            for (x, w) in rule.points(a, a + dy) {
                match rho(x) {
                    Ok((_, rr, rm)) => {
                        ir += w * rr;
                        im += w * rm;
                    }
                    Err(e) => err = Some(e),
                }
            }
            if let Some(e) = err {
                return Err(e);
            }
            big_r[j] = big_r[j - 1] + ir;
            big_m[j] = big_m[j - 1] + im;
        }
        let exact_inverse_tau = mech.b == 0.0
            && match mech.jump {
                super::mechanism::JumpMeasure::None => mech.d > 0.0,
                super::mechanism::JumpMeasure::AlphaStable { .. } => mech.d == 0.0,
                _ => false,
            };
        Ok(Self {
            flow: flow.clone(),
            t,
            tau_min,
            y0,
            dy,
            ln_ubar,
            rho_r,
            big_r,
            rho_m,
            big_m,
            law,
            exact_inverse_tau,
        })
    }

    /// Disables the closed-form hazard shortcut (test hook).
    pub fn force_tabulated(mut self) -> Self {
        self.exact_inverse_tau = false;
        self
    }

    pub fn ubar(&self, tau: f64) -> Result<f64> {
        self.flow.ubar(tau)
    }

    /// Interpolated `ubar_tau`.
    pub fn ubar_interp(&self, tau: f64) -> f64 {
        let y = tau.ln();
        // d ln ubar / d ln tau = -tau psi(ubar)/ubar = -(rho_m + b tau).
        let b = self.flow.mech.b;
        let deriv = |j: usize| -(self.rho_m[j] + b * (self.y0 + j as f64 * self.dy).exp());
        if y <= self.y0 {
            return (self.ln_ubar[0] + deriv(0) * (y - self.y0)).exp();
        }
        let (j, u) = self.locate(y);
        hermite(self.ln_ubar[j], self.ln_ubar[j + 1], deriv(j), deriv(j + 1), self.dy, u).exp()
    }

    /// Total split rate `r_tau`.
    pub fn rate(&self, tau: f64) -> Result<f64> {
        let u = self.ubar(tau)?;
        let m = &self.flow.mech;
        Ok(m.psi_prime(u) - m.psi_unchecked(u) / u)
    }

    /// `m_tau = psi(ubar_tau)/ubar_tau - b`.
    pub fn growth(&self, tau: f64) -> Result<f64> {
        let u = self.ubar(tau)?;
        Ok(self.flow.mech.psi_unchecked(u) / u - self.flow.mech.b)
    }

    /// Diffusive and jump parts of `r_tau`, computed from the offspring mixture.
    pub fn rate_components(&self, tau: f64) -> Result<(f64, f64)> {
        let u = self.ubar(tau)?;
        Ok(self.components_at(u))
    }

    fn components_at(&self, u: f64) -> (f64, f64) {
        let rd = 0.5 * self.flow.mech.d * u;
        let rj = match &self.law {
            OffspringLaw::Binary => 0.0,
            OffspringLaw::Stable { c, alpha } => (alpha - 1.0) * c * u.powf(alpha - 1.0),
            OffspringLaw::Mixture(JumpLaw::Uniform { len, density }) => density * len * g_split_mean(u * len) / u,
            OffspringLaw::Mixture(JumpLaw::Atoms { xs, ws }) => xs.iter().zip(ws).map(|(x, w)| w * g_split(u * x)).sum::<f64>() / u,
            OffspringLaw::Mixture(_) => 0.0,
        };
        (rd, rj)
    }

    /// `r_tau E[K_tau^{(k)}] = ubar_tau^{k-1} (1{k=2} d + int x^k Lambda(dx))`.
    pub fn factorial_moment(&self, tau: f64, k: u32) -> Result<f64> {
        if k < 2 {
            return Err(Error::Invalid("factorial moments start at k = 2".into()));
        }
        let u = self.ubar(tau)?;
        Ok(u.powi(k as i32 - 1) * self.flow.mech.jump_moment(k))
    }

    fn locate(&self, y: f64) -> (usize, f64) {
        let s = ((y - self.y0) / self.dy).clamp(0.0, (TAU_GRID - 1) as f64);
        let j = (s.floor() as usize).min(TAU_GRID - 2);
        (j, s - j as f64)
    }

    fn table_eval(&self, big: &[f64], rho: &[f64], tau: f64) -> f64 {
        let y = tau.ln();
        if y <= self.y0 {
            return big[0] + rho[0] * (y - self.y0);
        }
        let (j, u) = self.locate(y);
        hermite(big[j], big[j + 1], rho[j], rho[j + 1], self.dy, u)
    }

    /// `int_{tau_min}^{tau} r`.
    pub fn cumulative_hazard(&self, tau: f64) -> f64 {
        if self.exact_inverse_tau {
            return (tau / self.tau_min).ln();
        }
        self.table_eval(&self.big_r, &self.rho_r, tau)
    }

    /// `exp(-int_0^s m_{t-x} dx)` from the tabulated cumulative integral.
    pub fn compensation(&self, s: f64) -> f64 {
        let hi = self.table_eval(&self.big_m, &self.rho_m, self.t);
        let lo = self.table_eval(&self.big_m, &self.rho_m, self.t - s);
        (-(hi - lo)).exp()
    }

    /// `exp(-int_0^s m_{t-x} dx)` by direct Gauss-Legendre quadrature in `ln tau`.
    pub fn compensation_exact(&self, s: f64) -> Result<f64> {
        let a = (self.t - s).ln();
        let b = self.t.ln();
        let n = ((b - a) / 0.05).ceil().max(1.0) as usize;
        let h = (b - a) / n as f64;
        let rule = gl16();
        let mut total = 0.0;
        for p in 0..n {
            let lo = a + p as f64 * h;
            for (x, w) in rule.points(lo, lo + h) {
                let tau = x.exp();
                total += w * tau * self.growth(tau)?;
            }
        }
        Ok((-total).exp())
    }

    /// Time to horizon at which a node alive at time-to-horizon `tau0` splits.
    pub fn sample_split_tau<R: Rng + ?Sized>(&self, tau0: f64, rng: &mut R) -> f64 {
        let e = -(1.0 - rng.random::<f64>()).ln();
        if self.exact_inverse_tau {
            return tau0 * (-e).exp();
        }
        let target = self.cumulative_hazard(tau0) - e;
        if target <= self.big_r[0] {
            return (self.y0 + (target - self.big_r[0]) / self.rho_r[0]).exp();
        }
        let j = match self.big_r.binary_search_by(|v| v.partial_cmp(&target).unwrap()) {
            Ok(j) => return (self.y0 + j as f64 * self.dy).exp(),
            Err(j) => j - 1,
        }
        .min(TAU_GRID - 2);
        let f = |u: f64| hermite(self.big_r[j], self.big_r[j + 1], self.rho_r[j], self.rho_r[j + 1], self.dy, u) - target;
        let u = brent(f, 0.0, 1.0, 1e-14, 100).unwrap_or(0.5);
        (self.y0 + (j as f64 + u) * self.dy).exp()
    }

    /// Offspring number of a split at time to horizon `tau`.
    pub fn sample_offspring<R: Rng + ?Sized>(&self, tau: f64, rng: &mut R) -> u64 {
        match &self.law {
            OffspringLaw::Binary => 2,
            OffspringLaw::Stable { alpha, .. } => {
                if self.flow.mech.d > 0.0 {
                    let (rd, rj) = self.components_at(self.ubar_interp(tau));
                    if rng.random::<f64>() * (rd + rj) < rd {
                        return 2;
                    }
                }
                sample_sibuya(*alpha, rng)
            }
            OffspringLaw::Mixture(law) => {
                let u = self.ubar_interp(tau);
                let (rd, rj) = self.components_at(u);
                if rng.random::<f64>() * (rd + rj) < rd {
                    return 2;
                }
                let lambda = match law {
                    JumpLaw::Uniform { len, .. } => {
                        let env = g_split(u * len);
                        loop {
                            let x = len * rng.random::<f64>();
                            if rng.random::<f64>() * env < g_split(u * x) {
                                break u * x;
                            }
                        }
                    }
                    JumpLaw::Atoms { xs, ws } => {
                        let weights: Vec<f64> = xs.iter().zip(ws).map(|(x, w)| w * g_split(u * x)).collect();
                        let total: f64 = weights.iter().sum();
                        let mut v = rng.random::<f64>() * total;
                        let mut pick = xs.len() - 1;
                        for (i, w) in weights.iter().enumerate() {
                            if v < *w {
                                pick = i;
                                break;
                            }
                            v -= w;
                        }
                        u * xs[pick]
                    }
                    _ => unreachable!("mixture law holds jumps"),
                };
                sample_poisson_at_least_two(lambda, rng)
            }
        }
    }
}

/// Cubic Hermite interpolant on `[0, 1]` of a function with values `f0, f1`
/// and derivatives `d0, d1` with respect to a variable spaced by `h`.
fn hermite(f0: f64, f1: f64, d0: f64, d1: f64, h: f64, u: f64) -> f64 {
    let u2 = u * u;
    let u3 = u2 * u;
    (2.0 * u3 - 3.0 * u2 + 1.0) * f0 + (u3 - 2.0 * u2 + u) * h * d0 + (-2.0 * u3 + 3.0 * u2) * f1 + (u3 - u2) * h * d1
}

/// `P(K >= n) = Gamma(n - alpha) / (Gamma(n) Gamma(2 - alpha))` for `n >= 2`.
pub fn sibuya_survival(alpha: f64, n: u64) -> f64 {
    if n <= 2 {
        return 1.0;
    }
    let nf = n as f64;
    (ln_gamma(nf - alpha) - ln_gamma(nf) - ln_gamma(2.0 - alpha)).exp()
}

/// Offspring law of a stable split: `P(K = i) ∝ Gamma(i - alpha)/i!` on `i >= 2`,
/// sampled exactly by inverting the closed-form survival function.
pub fn sample_sibuya<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> u64 {
    let u = 1.0 - rng.random::<f64>();
    // K = max{n >= 2 : S(n) >= u}.
    let mut lo = 2u64;
    let mut hi = 4u64;
    while sibuya_survival(alpha, hi) >= u {
        lo = hi;
        if hi >= 1 << 62 {
            return hi;
        }
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if sibuya_survival(alpha, mid) >= u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Poisson(`lambda`) conditioned on being at least two.
pub fn sample_poisson_at_least_two<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if lambda >= 1.0 {
        let p = Poisson::new(lambda).expect("positive mean");
        loop {
            let k: f64 = p.sample(rng);
            if k >= 2.0 {
                return k as u64;
            }
        }
    }
    // Sequential inversion of lambda^k / k! on k >= 2.
    let z = lambda.exp() * g_split(lambda);
    let mut v = rng.random::<f64>() * z;
    let mut k = 2u64;
    let mut term = 0.5 * lambda * lambda;
    while v > term && term > 0.0 {
        v -= term;
        k += 1;
        term *= lambda / k as f64;
    }
    k
}

/// One node of a reduced tree.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedNode {
    /// Ulam-Harris label; the root is empty.
    pub label: Vec<u32>,
    pub parent: Option<usize>,
    /// Birth time.
    pub sigma: f64,
    /// Life length (up to the cut for censored nodes).
    pub omega: f64,
    /// Offspring count (0 for censored nodes).
    pub k: u64,
    /// Still alive at the cut time.
    pub censored: bool,
}

impl ReducedNode {
    pub fn alive_at(&self, s: f64, cut: f64) -> bool {
        if self.censored {
            self.sigma <= s && s <= cut
        } else {
            self.sigma <= s && s < self.sigma + self.omega
        }
    }
}

/// Reduced tree of horizon `t`, simulated up to `cut < t`. Nodes are stored in
/// Ulam-Harris lexicographic (depth-first) order.
#[derive(Clone, Debug)]
pub struct ReducedTree {
    pub t: f64,
    pub cut: f64,
    pub nodes: Vec<ReducedNode>,
    /// `subtree_end[v]`: one past the last node of the subtree rooted at `v`.
    pub subtree_end: Vec<usize>,
}

/// Default cut (probe time) `t (1 - 2^{-10})`.
pub fn default_probe(t: f64) -> f64 {
    t * (1.0 - 1.0 / 1024.0)
}

/// Simulates the reduced process of horizon `rates.t` up to time `cut`.
pub fn simulate_reduced<R: Rng + ?Sized>(rates: &ReducedRates, cut: f64, rng: &mut R) -> Result<ReducedTree> {
    simulate_reduced_capped(rates, cut, NODE_CAP, rng)
}

pub fn simulate_reduced_capped<R: Rng + ?Sized>(rates: &ReducedRates, cut: f64, cap: usize, rng: &mut R) -> Result<ReducedTree> {
    let t = rates.t;
    if !(cut >= 0.0 && cut < t) {
        return Err(Error::Invalid(format!("cut must lie in [0, t), got {cut} with t = {t}")));
    }
    let mut nodes: Vec<ReducedNode> = Vec::new();
    // Stack of (parent index, label, birth time); children are pushed in reverse.
    let mut stack: Vec<(Option<usize>, Vec<u32>, f64)> = vec![(None, Vec::new(), 0.0)];
    while let Some((parent, label, sigma)) = stack.pop() {
        let tau1 = rates.sample_split_tau(t - sigma, rng);
        let split = t - tau1;
        let idx = nodes.len();
        if split >= cut {
            nodes.push(ReducedNode { label, parent, sigma, omega: cut - sigma, k: 0, censored: true });
        } else {
            let k = rates.sample_offspring(tau1, rng);
            if nodes.len() + stack.len() + k as usize > cap {
                return Err(Error::Explosion(cap));
            }
            for i in (1..=k as u32).rev() {
                let mut l = label.clone();
                l.push(i);
                stack.push((Some(idx), l, split));
            }
            nodes.push(ReducedNode { label, parent, sigma, omega: split - sigma, k, censored: false });
        }
    }
    let mut subtree_end: Vec<usize> = (1..=nodes.len()).collect();
    for v in (1..nodes.len()).rev() {
        let p = nodes[v].parent.expect("non-root node has a parent");
        subtree_end[p] = subtree_end[p].max(subtree_end[v]);
    }
    Ok(ReducedTree { t, cut, nodes, subtree_end })
}

/// Number of reduced-process particles alive at `s`, without storing the tree.
pub fn reduced_count<R: Rng + ?Sized>(rates: &ReducedRates, s: f64, rng: &mut R) -> Result<u64> {
    let t = rates.t;
    if !(s >= 0.0 && s < t) {
        return Err(Error::Invalid(format!("s must lie in [0, t), got {s} with t = {t}")));
    }
    // Siblings share a birth time and law, so the stack stores multiplicities.
    let mut stack: Vec<(f64, u64)> = vec![(0.0, 1)];
    let mut count = 0u64;
    let mut work = 0usize;
    while let Some(top) = stack.last_mut() {
        let sigma = top.0;
        top.1 -= 1;
        if top.1 == 0 {
            stack.pop();
        }
        let tau1 = rates.sample_split_tau(t - sigma, rng);
        let split = t - tau1;
        if split > s {
            count += 1;
        } else {
            let k = rates.sample_offspring(tau1, rng);
            stack.push((split, k));
        }
        work += 1;
        if work > 100 * NODE_CAP {
            return Err(Error::Explosion(100 * NODE_CAP));
        }
    }
    Ok(count)
}

impl ReducedTree {
    /// `Z_{s,t}`: number of nodes alive at `s`.
    pub fn count_alive(&self, s: f64) -> usize {
        self.nodes.iter().filter(|n| n.alive_at(s, self.cut)).count()
    }

    /// Node indices alive at `s`, in planar order.
    pub fn alive(&self, s: f64) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&v| self.nodes[v].alive_at(s, self.cut)).collect()
    }

    /// Number of nodes of the subtree of `v` alive at the cut.
    pub fn descendants_at_cut(&self, v: usize) -> usize {
        self.nodes[v..self.subtree_end[v]].iter().filter(|n| n.censored).count()
    }

    fn ancestor_at_depth(&self, mut v: usize, depth: usize) -> usize {
        while self.nodes[v].label.len() > depth {
            v = self.nodes[v].parent.expect("depth above root");
        }
        v
    }

    fn mrca(&self, v: usize, w: usize) -> usize {
        let (a, b) = (&self.nodes[v].label, &self.nodes[w].label);
        let common = a.iter().zip(b).take_while(|(x, y)| x == y).count();
        self.ancestor_at_depth(v, common)
    }
}

/// Genealogy of the particles alive at level `s`.
#[derive(Clone, Debug)]
pub struct Genealogy {
    pub s: f64,
    /// Node indices of the leaves in planar order.
    pub leaves: Vec<usize>,
    pub matrix: PlanarUltrametricMatrix,
    /// `theta_v = exp(-int_0^{cut} m) * (descendants of v at the cut)`.
    pub weights: Vec<f64>,
}

/// Distance matrix `d(v, w) = s - (sigma + omega)` of the MRCA, and the weight estimates.
pub fn genealogy_at(tree: &ReducedTree, rates: &ReducedRates, s: f64) -> Result<Genealogy> {
    if !(s >= 0.0 && s <= tree.cut) {
        return Err(Error::Domain(format!("genealogy level {s} lies outside [0, {}]", tree.cut)));
    }
    let leaves = tree.alive(s);
    if leaves.is_empty() {
        return Err(Error::Extinct);
    }
    let depths: Vec<f64> = leaves
        .windows(2)
        .map(|w| {
            let m = &tree.nodes[tree.mrca(w[0], w[1])];
            s - (m.sigma + m.omega)
        })
        .collect();
    let matrix = PlanarUltrametricMatrix::from_depths(&depths)?;
    let c = rates.compensation(tree.cut);
    let weights = leaves.iter().map(|&v| c * tree.descendants_at_cut(v) as f64).collect();
    Ok(Genealogy { s, leaves, matrix, weights })
}

/// `W_{s,t} = exp(-int_0^s m_{t-x} dx) Z_{s,t}` for the tree.
pub fn martingale(tree: &ReducedTree, rates: &ReducedRates, s: f64) -> f64 {
    rates.compensation(s) * tree.count_alive(s) as f64
}
