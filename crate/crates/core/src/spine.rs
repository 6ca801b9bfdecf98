//! The spine diffusion `d zeta = (v_1'/v_1)(zeta) dt + dB` and the biased
//! k-spine measures, estimated by nested Monte Carlo over the recursive
//! definition; the reversed-process moments by Green-function quadrature;
//! and the jump moments built from both.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbm::{run_reversed, Harmonics, ReversedProcess};
use crate::error::{Error, Result};
use crate::functional::{Functional, ScalarFn};
use crate::quad::cumulative_simpson;
use crate::rng::stream;
use crate::spectral::{CutoffGeometry, GreenFunction, Regime, SpectralSolution};
use crate::stats::{z_score, Accumulator};
use crate::ultrametric::{MarkedMatrix, Matrix};

/// Spine simulation parameters.
#[derive(Clone, Debug)]
pub struct SpineConfig {
    pub harmonics: Harmonics,
    pub l: f64,
    pub dt: f64,
    /// Width of the boundary layers where the drift is linearized.
    pub delta_b: f64,
    pub w: f64,
    pub rate_bound: f64,
}

impl SpineConfig {
    pub fn new(sol: &SpectralSolution) -> Result<Self> {
        let harmonics = Harmonics::new(sol);
        let cfg = Self {
            l: sol.l,
            dt: 1e-3,
            delta_b: sol.l / 2048.0,
            w: sol.w,
            rate_bound: 0.5 * (1.0 + sol.potential.max_value()),
            harmonics,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_dt(mut self, dt: f64) -> Result<Self> {
        self.dt = dt;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.delta_b > 0.0 && 2.0 * self.delta_b < self.l) {
            return Err(Error::Invalid(format!("boundary width {} incompatible with L = {}", self.delta_b, self.l)));
        }
        let d = self.drift(self.delta_b).abs() + self.drift(self.l - self.delta_b).abs();
        if !d.is_finite() {
            return Err(Error::Invalid("spine drift is not finite at the boundary layers".into()));
        }
        Ok(())
    }

    /// `v_1'/v_1`, replaced by `1/x` and `-1/(L - x)` inside the boundary layers.
    pub fn drift(&self, x: f64) -> f64 {
        if x < self.delta_b {
            return 1.0 / x;
        }
        if x > self.l - self.delta_b {
            return -1.0 / (self.l - x);
        }
        let (v, dv) = self.harmonics.v1_pair(x);
        dv / v
    }

    pub fn rate(&self, x: f64) -> f64 {
        0.5 * self.harmonics.potential.value(x) + 0.5
    }

    fn in_layer(&self, x: f64) -> bool {
        x < self.delta_b || x > self.l - self.delta_b
    }

    /// Advances the spine by `duration`; steps falling outside `(0, L)` are
    /// redrawn with half the step length.
    pub fn advance<R: Rng + ?Sized>(&self, mut x: f64, duration: f64, stats: &mut PathStats, rng: &mut R) -> f64 {
        let mut left = duration;
        while left > 1e-15 {
            let base = if self.in_layer(x) { 0.5 * self.dt } else { self.dt };
            let mut h = base.min(left);
            let mut tries = 0;
            loop {
                let z: f64 = rng.sample(StandardNormal);
                let y = x + self.drift(x) * h + h.sqrt() * z;
                stats.steps += 1;
                if y > 0.0 && y < self.l {
                    x = y;
                    break;
                }
                stats.retries += 1;
                tries += 1;
                if tries >= 40 {
                    // Reflect into the domain as a last resort.
                    x = if y <= 0.0 { (-y).min(self.l).max(f64::MIN_POSITIVE) } else { (2.0 * self.l - y).max(0.0).min(self.l * (1.0 - 1e-15)) };
                    stats.reflections += 1;
                    break;
                }
                h *= 0.5;
            }
            left -= h;
        }
        x
    }
}

/// Step counters of a simulated path.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct PathStats {
    pub steps: u64,
    pub retries: u64,
    pub reflections: u64,
}

impl PathStats {
    pub fn merge(&mut self, o: &PathStats) {
        self.steps += o.steps;
        self.retries += o.retries;
        self.reflections += o.reflections;
    }

    pub fn retry_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.retries as f64 / self.steps as f64
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpinePath {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    pub stats: PathStats,
}

/// Spine positions at the given record times (sorted, within `[0, horizon]`).
pub fn simulate_spine<R: Rng + ?Sized>(cfg: &SpineConfig, x0: f64, horizon: f64, record: &[f64], rng: &mut R) -> Result<SpinePath> {
    if !(x0 > 0.0 && x0 < cfg.l) {
        return Err(Error::Domain(format!("x0 = {x0} must lie in (0, {})", cfg.l)));
    }
    let mut times: Vec<f64> = record.iter().copied().filter(|&t| (0.0..=horizon).contains(&t)).collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut stats = PathStats::default();
    let mut xs = Vec::with_capacity(times.len());
    let (mut t, mut x) = (0.0, x0);
    for &s in &times {
        x = cfg.advance(x, s - t, &mut stats, rng);
        t = s;
        xs.push(x);
    }
    Ok(SpinePath { times, xs, stats })
}

/// Inverse-CDF sampler for `Pi = v_1^2 / ||v_1||^2` on the solution grid.
#[derive(Clone, Debug)]
pub struct PiSampler {
    step: f64,
    cdf: Vec<f64>,
}

impl PiSampler {
    pub fn new(h: &Harmonics) -> Self {
        // Refine the grid four times so the piecewise-linear CDF inverse is accurate.
        let (step, v) = h.v1_samples();
        let n = (v.len() - 1) * 4;
        let fine = step / 4.0;
        let dens: Vec<f64> = (0..=n).map(|i| h.v1(i as f64 * fine).powi(2)).collect();
        let mut cdf = cumulative_simpson(&dens, fine);
        let total = *cdf.last().unwrap();
        cdf.iter_mut().for_each(|c| *c /= total);
        Self { step: fine, cdf }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        let i = self.cdf.partition_point(|&c| c < p).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let frac = if c1 > c0 { ((p - c0) / (c1 - c0)).clamp(0.0, 1.0) } else { 0.5 };
        ((i - 1) as f64 + frac) * self.step
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.quantile(u).max(f64::MIN_POSITIVE)
    }

    /// `Pi([0, x])`.
    pub fn cdf(&self, x: f64) -> f64 {
        crate::quad::lerp_uniform(&self.cdf, 0.0, self.step, x)
    }
}

/// Total-variation distance to `Pi` on equal-width bins at each time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixRow {
    pub t: f64,
    pub tv: f64,
    /// TV of an exact `Pi` sample of the same size (sampling noise level).
    pub tv_floor: f64,
    pub retry_rate: f64,
}

pub fn mixing_diagnostics(cfg: &SpineConfig, x0: f64, times: &[f64], n: usize, bins: usize, seed: u64) -> Result<Vec<MixRow>> {
    let horizon = times.iter().copied().fold(0.0, f64::max);
    let paths: Result<Vec<SpinePath>> = (0..n)
        .into_par_iter()
        .map(|i| simulate_spine(cfg, x0, horizon, times, &mut stream(seed, "spine-mix", i as u64)))
        .collect();
    let paths = paths?;
    let pi = PiSampler::new(&cfg.harmonics);
    let probs: Vec<f64> = (0..bins).map(|b| pi.cdf((b + 1) as f64 * cfg.l / bins as f64) - pi.cdf(b as f64 * cfg.l / bins as f64)).collect();
    let tv = |xs: &mut dyn Iterator<Item = f64>| {
        let mut counts = vec![0usize; bins];
        for x in xs {
            counts[((x / cfg.l * bins as f64) as usize).min(bins - 1)] += 1;
        }
        0.5 * counts.iter().zip(&probs).map(|(&c, &p)| (c as f64 / n as f64 - p).abs()).sum::<f64>()
    };
    let mut rng = stream(seed, "spine-mix-floor", 0);
    let floor = tv(&mut (0..n).map(|_| pi.sample(&mut rng)));
    let mut stats = PathStats::default();
    for p in &paths {
        stats.merge(&p.stats);
    }
    let mut sorted: Vec<f64> = times.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(j, &t)| MixRow { t, tv: tv(&mut paths.iter().map(|p| p.xs[j])), tv_floor: floor, retry_rate: stats.retry_rate() })
        .collect())
}

// ---------------------------------------------------------------------------
// k-spine measures

/// Sample sizes for the nested estimator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KSpineBudget {
    /// Outer replicates per batch.
    pub outer: usize,
    /// Stratified branch times per outer path.
    pub strata: usize,
    /// Child estimates at level `l` use `outer / child_divisor^l` replicates.
    pub child_divisor: usize,
    /// Upper bound on child replicates.
    pub child_cap: usize,
    /// Keep adding batches until the standard error drops below this.
    pub target_se: Option<f64>,
    pub max_outer: usize,
}

impl Default for KSpineBudget {
    fn default() -> Self {
        Self { outer: 10_000, strata: 8, child_divisor: 4, child_cap: 16, target_se: None, max_outer: 10_000 }
    }
}

impl KSpineBudget {
    pub fn with_outer(outer: usize) -> Self {
        Self { outer, max_outer: outer, ..Self::default() }
    }

    fn child(&self, level: usize) -> usize {
        (self.outer / self.child_divisor.max(1).pow(level as u32)).clamp(1, self.child_cap.max(1))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KSpineEstimate {
    pub value: f64,
    pub stderr: f64,
    pub k: usize,
    pub t: f64,
    /// Replicates per recursion level, outermost first.
    pub levels: Vec<usize>,
    /// `nested` for product-form functionals, `tree` for the joint sampler.
    pub method: String,
    /// Target standard error not reached within the budget.
    pub budget_exhausted: bool,
    pub retry_rate: f64,
}

/// Functional rewritten for the nested recursion. The first split of a
/// k-spine tree is binary, so products over three or more blocks at gap zero
/// carry no mass.
#[derive(Clone, Debug)]
enum Plan {
    Zero,
    /// `c` on one leaf.
    One(f64),
    Leaf(ScalarFn),
    /// Sum of `f(u) M^{n,u}[F_1] M^{k-n,u}[F_2]` terms sharing the outer spine.
    Branch { terms: Vec<(ScalarFn, Plan, Plan)> },
}

impl Plan {
    fn from_functional(g: &Functional) -> Option<Plan> {
        Some(match g {
            Functional::Constant { k: 1, value } => Plan::One(*value),
            Functional::Constant { k, value } => Plan::Branch {
                terms: (1..*k).map(|n| (ScalarFn::Constant(*value), Plan::One(1.0).ones(n), Plan::One(1.0).ones(k - n))).collect(),
            },
            Functional::Leaf(f) => Plan::Leaf(f.clone()),
            Functional::Product(p) => {
                if p.epsilon > 0.0 {
                    return None;
                }
                let parts = p.composition.parts();
                if p.k() == 1 {
                    let c = p.depth.eval(0.0);
                    return Some(match Plan::from_functional(&p.children[0])? {
                        Plan::One(v) => Plan::One(c * v),
                        Plan::Leaf(f) => Plan::Leaf(ScalarFn::custom(move |x| c * f.eval(x))),
                        other => other,
                    });
                }
                if parts.len() != 2 {
                    return Some(Plan::Zero);
                }
                Plan::Branch {
                    terms: vec![(p.depth.clone(), Plan::from_functional(&p.children[0])?, Plan::from_functional(&p.children[1])?)],
                }
            }
        })
    }

    /// `M^{k}[1]` plan.
    fn ones(self, k: usize) -> Plan {
        if k == 1 {
            Plan::One(1.0)
        } else {
            Plan::Branch { terms: (1..k).map(|n| (ScalarFn::Constant(1.0), Plan::One(1.0).ones(n), Plan::One(1.0).ones(k - n))).collect() }
        }
    }

    fn depth(&self) -> usize {
        match self {
            Plan::Branch { terms } => 1 + terms.iter().map(|(_, a, b)| a.depth().max(b.depth())).max().unwrap_or(0),
            _ => 0,
        }
    }
}

struct Nested<'a> {
    cfg: &'a SpineConfig,
    budget: &'a KSpineBudget,
}

impl Nested<'_> {
    /// One unbiased sample of `M^{k,t}_x[plan]`.
    fn sample<R: Rng + ?Sized>(&self, plan: &Plan, t: f64, x: f64, level: usize, strata: usize, st: &mut PathStats, rng: &mut R) -> f64 {
        let w = self.cfg.w;
        match plan {
            Plan::Zero => 0.0,
            Plan::One(c) => c * (-w * t).exp(),
            Plan::Leaf(f) => {
                let y = self.cfg.advance(x, t, st, rng);
                (-w * t).exp() * f.eval(y)
            }
            Plan::Branch { terms } => {
                let m = strata.max(1);
                let shift: f64 = rng.random();
                let (mut s_prev, mut y) = (0.0, x);
                let mut acc = 0.0;
                for j in 0..m {
                    let s = t * (j as f64 + shift) / m as f64;
                    y = self.cfg.advance(y, s - s_prev, st, rng);
                    s_prev = s;
                    let u = t - s;
                    let base = (-w * s).exp() * self.cfg.rate(y) * self.cfg.harmonics.h(y);
                    let mut sum = 0.0;
                    for (f, a, b) in terms {
                        let fu = f.eval(u);
                        if fu == 0.0 {
                            continue;
                        }
                        sum += fu * self.child_mean(a, u, y, level + 1, st, rng) * self.child_mean(b, u, y, level + 1, st, rng);
                    }
                    acc += base * sum;
                }
                acc * t / m as f64
            }
        }
    }

    fn child_mean<R: Rng + ?Sized>(&self, plan: &Plan, u: f64, y: f64, level: usize, st: &mut PathStats, rng: &mut R) -> f64 {
        match plan {
            Plan::Zero | Plan::One(_) => self.sample(plan, u, y, level, 1, st, rng),
            _ => {
                let b = self.budget.child(level);
                (0..b).map(|_| self.sample(plan, u, y, level, 1, st, rng)).sum::<f64>() / b as f64
            }
        }
    }
}

/// One draw of the joint sampler: the tree shape, branch times and leaf marks
/// are generated along the recursion (uniform branch time, uniform split
/// size) and the weight carries the change of measure, so that
/// `E[weight G(U)] = M^{k,t}_x[G]` for every functional `G`.
pub fn sample_spine_tree<R: Rng + ?Sized>(cfg: &SpineConfig, k: usize, t: f64, x: f64, st: &mut PathStats, rng: &mut R) -> (f64, MarkedMatrix) {
    if k == 1 {
        let y = cfg.advance(x, t, st, rng);
        return ((-cfg.w * t).exp(), MarkedMatrix { matrix: Matrix::zeros(1), marks: vec![y] });
    }
    let u = t * rng.random::<f64>();
    let n = rng.random_range(1..k);
    let s = t - u;
    let y = cfg.advance(x, s, st, rng);
    let weight = t * (k - 1) as f64 * (-cfg.w * s).exp() * cfg.rate(y) * cfg.harmonics.h(y);
    let (w1, a) = sample_spine_tree(cfg, n, u, y, st, rng);
    let (w2, b) = sample_spine_tree(cfg, k - n, u, y, st, rng);
    let mut m = Matrix::zeros(k);
    for i in 0..k {
        for j in 0..k {
            let v = match (i < n, j < n) {
                (true, true) => a.matrix.get(i, j),
                (false, false) => b.matrix.get(i - n, j - n),
                _ => u,
            };
            m.set(i, j, v);
        }
    }
    let mut marks = a.marks;
    marks.extend(b.marks);
    (weight * w1 * w2, MarkedMatrix { matrix: m, marks })
}

/// Estimates `M^{k,t}_x[G]`. Product-form functionals without gaps go through
/// the nested recursion; any other functional through the joint sampler.
pub fn k_spine(cfg: &SpineConfig, x0: f64, k: usize, t: f64, g: &Functional, budget: &KSpineBudget, seed: u64) -> Result<KSpineEstimate> {
    if !(1..=4).contains(&k) {
        return Err(Error::Invalid(format!("k-spine estimates need 1 <= k <= 4, got {k}")));
    }
    if g.k() != k {
        return Err(Error::Shape(format!("functional accepts {} leaves, not {k}", g.k())));
    }
    if !(x0 > 0.0 && x0 < cfg.l) {
        return Err(Error::Domain(format!("x0 = {x0} must lie in (0, {})", cfg.l)));
    }
    if !(t >= 0.0) {
        return Err(Error::Invalid(format!("t must be >= 0, got {t}")));
    }
    if budget.outer == 0 {
        return Err(Error::Invalid("budget needs at least one outer replicate".into()));
    }
    let plan = Plan::from_functional(g);
    if let Some(Plan::One(c)) = plan {
        // M^{1,t}[c] = c e^{-wt} exactly.
        return Ok(KSpineEstimate {
            value: c * (-cfg.w * t).exp(),
            stderr: 0.0,
            k,
            t,
            levels: vec![],
            method: "exact".into(),
            budget_exhausted: false,
            retry_rate: 0.0,
        });
    }
    let levels: Vec<usize> = match &plan {
        Some(p) => (0..p.depth()).map(|l| if l == 0 { budget.outer } else { budget.child(l) }).collect(),
        None => vec![budget.outer; k.saturating_sub(1).max(1)],
    };
    let nested = Nested { cfg, budget };
    let mut acc = Accumulator::new();
    let mut stats = PathStats::default();
    let mut batch = 0u64;
    loop {
        let start = batch * budget.outer as u64;
        let out: Vec<(f64, PathStats)> = (0..budget.outer as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(seed, "k-spine", start + i);
                let mut st = PathStats::default();
                let v = match &plan {
                    Some(p) => nested.sample(p, t, x0, 0, budget.strata, &mut st, &mut rng),
                    None => {
                        let (w, m) = sample_spine_tree(cfg, k, t, x0, &mut st, &mut rng);
                        if w == 0.0 {
                            0.0
                        } else {
                            w * g.eval(&m)
                        }
                    }
                };
                (v, st)
            })
            .collect();
        for (v, st) in &out {
            acc.push(*v);
            stats.merge(st);
        }
        batch += 1;
        let done = match budget.target_se {
            None => true,
            Some(target) => acc.stderr() <= target,
        };
        if done || acc.n as usize + budget.outer > budget.max_outer.max(budget.outer) {
            let exhausted = budget.target_se.is_some_and(|target| !(acc.stderr() <= target));
            return Ok(KSpineEstimate {
                value: acc.mean,
                stderr: acc.stderr(),
                k,
                t,
                levels,
                method: if plan.is_some() { "nested" } else { "tree" }.into(),
                budget_exhausted: exhausted,
                retry_rate: stats.retry_rate(),
            });
        }
    }
}

/// Upper bound `M^{2,t}_x[1] <= e ||r||_inf int_0^L h(y) G_{1/t}(x, y) dy`,
/// from `1{s <= t} <= e^{(t - s)/t}`.
pub fn m2_green_bound(sol: &SpectralSolution, x: f64, t: f64) -> Result<f64> {
    let green = GreenFunction::new(sol, 1.0 / t)?;
    let rmax = 0.5 * (1.0 + sol.potential.max_value());
    let mut err = None;
    let integral = sol.integrate(|y, _, _| {
        if y <= 0.0 || y >= sol.l {
            return 0.0;
        }
        match green.eval(x, y) {
            Ok(g) => sol.h_at(y) * g,
            Err(e) => {
                err = Some(e);
                0.0
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok(std::f64::consts::E * rmax * integral)
}

// ---------------------------------------------------------------------------
// Reversed process

/// `M^{k,inf}_z[1]`, `k = 1..=kmax`, on a uniform grid, from
/// `M^{k,inf}(z) = int_0^inf G(z, y) h(y) sum_p M^p(y) M^{k-p}(y) dy`
/// with `G(z, y) = a(y) b(max(z, y))`, `a = v^2`, `b(m) = int_m^inf v^{-2}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReversedMomentTable {
    pub step: f64,
    /// `m[k - 1][i] = M^{k,inf}_{i step}[1]`.
    pub m: Vec<Vec<f64>>,
}

impl ReversedMomentTable {
    pub fn new(proc: &ReversedProcess, kmax: usize, z_max: f64, step: f64) -> Result<Self> {
        if kmax == 0 || !(step > 0.0) || !(z_max > 0.0) {
            return Err(Error::Invalid("moment table needs kmax >= 1, step > 0 and z_max > 0".into()));
        }
        let (mu, beta) = (proc.mu, proc.beta);
        let mut y_max = z_max + 40.0 / (mu - beta);
        if mu > 3.0 * beta {
            y_max = y_max.max(40.0 / (mu - 3.0 * beta));
        }
        let n = ((y_max / step).ceil() as usize).max(2);
        let n = n + n % 2;
        let ys: Vec<f64> = (0..=n).map(|i| i as f64 * step).collect();
        let h: Vec<f64> = ys.iter().map(|&y| proc.h(y)).collect();
        let a: Vec<f64> = ys.iter().map(|&y| proc.v(y).powi(2)).collect();
        let b: Vec<f64> = ys.iter().map(|&y| if y > 0.0 { proc.green(y, y).unwrap() / proc.v(y).powi(2) } else { f64::INFINITY }).collect();
        let ab: Vec<f64> = ys.iter().map(|&y| if y > 0.0 { proc.green(y, y).unwrap() } else { 0.0 }).collect();
        let mut m: Vec<Vec<f64>> = vec![vec![1.0; n + 1]];
        for k in 2..=kmax {
            let f: Vec<f64> = (0..=n).map(|i| (1..k).map(|p| m[p - 1][i] * m[k - p - 1][i]).sum::<f64>()).collect();
            let lower: Vec<f64> = (0..=n).map(|i| a[i] * h[i] * f[i]).collect();
            let upper: Vec<f64> = (0..=n).map(|i| ab[i] * h[i] * f[i]).collect();
            let cl = cumulative_simpson(&lower, step);
            let cu = cumulative_simpson(&upper, step);
            let total = cu[n];
            let mk: Vec<f64> = (0..=n).map(|i| if i == 0 { 0.0 } else { b[i] * cl[i] + (total - cu[i]) }).collect();
            m.push(mk);
        }
        Ok(Self { step, m })
    }

    pub fn kmax(&self) -> usize {
        self.m.len()
    }

    pub fn z_max(&self) -> f64 {
        (self.m[0].len() - 1) as f64 * self.step
    }

    /// `M^{k,inf}_z[1]` by linear interpolation.
    pub fn get(&self, k: usize, z: f64) -> f64 {
        crate::quad::lerp_uniform(&self.m[k - 1], 0.0, self.step, z)
    }

    /// `sum_{p=1}^{k-1} M^p(z) M^{k-p}(z)` at grid node `i`.
    fn pair_sum(&self, k: usize, i: usize) -> f64 {
        (1..k).map(|p| self.m[p - 1][i] * self.m[k - p - 1][i]).sum()
    }
}

/// Both routes to the reversed k-spine mass.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReversedKSpine {
    pub z: f64,
    pub k: usize,
    pub horizon: f64,
    /// Green-function quadrature at `t = inf`.
    pub quadrature_inf: f64,
    /// Finite-horizon quadrature of `E_z[W_T^k] / (k! h(z))` when available (k <= 2).
    pub quadrature_horizon: Option<f64>,
    /// Simulation of `E_z[W_T^k] / (k! h(z))`.
    pub mc: f64,
    pub mc_se: f64,
    /// z-score of the simulation against the horizon quadrature when present,
    /// else against the limit.
    pub z_score: f64,
    pub inconsistent: bool,
}

pub fn k_spine_reversed(proc: &ReversedProcess, z: f64, k: usize, horizon: f64, n: usize, seed: u64) -> Result<ReversedKSpine> {
    if !(z > 0.0) {
        return Err(Error::Domain(format!("z = {z} must be positive")));
    }
    if !(1..=4).contains(&k) {
        return Err(Error::Invalid(format!("k must lie in 1..=4, got {k}")));
    }
    let table = ReversedMomentTable::new(proc, k, z + 1.0, 1.0 / 256.0)?;
    let quadrature_inf = table.get(k, z);
    let quadrature_horizon = match k {
        1 => Some(1.0),
        2 => {
            let (off, diag) = proc.second_moment_finite(z, horizon)?;
            Some(off + diag)
        }
        _ => None,
    };
    let fact: f64 = (1..=k).map(|i| i as f64).product();
    let hz = proc.h(z);
    let samples: Result<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, "reversed-k-spine", i as u64);
            Ok(run_reversed(proc, z, horizon, &[], &mut rng)?.final_w().powi(k as i32) / (fact * hz))
        })
        .collect();
    let acc = Accumulator::from_slice(&samples?);
    let reference = quadrature_horizon.unwrap_or(quadrature_inf);
    let zs = z_score(acc.mean, acc.stderr(), reference, 0.0);
    Ok(ReversedKSpine {
        z,
        k,
        horizon,
        quadrature_inf,
        quadrature_horizon,
        mc: acc.mean,
        mc_se: acc.stderr(),
        z_score: zs,
        inconsistent: zs.abs() > 4.0,
    })
}

/// `mhat_{k,(inf,A)} = k! A^{k - alpha} / (2 ||v_{1,inf}||) int_0^inf Pi h sum_p M^p M^{k-p} dz`.
pub fn jump_moment_limit(proc: &ReversedProcess, k: usize, a: f64, table: &ReversedMomentTable) -> Result<f64> {
    if k < 2 || k > table.kmax() {
        return Err(Error::Invalid(format!("k = {k} outside 2..={}", table.kmax())));
    }
    if !(proc.mu > 3.0 * proc.beta) {
        return Err(Error::Regime(format!("int Pi h diverges: mu = {} <= 3 beta = {}", proc.mu, 3.0 * proc.beta)));
    }
    if !(a >= 1.0) {
        return Err(Error::Invalid(format!("A must be >= 1, got {a}")));
    }
    let n = table.m[0].len() - 1;
    let y: Vec<f64> = (0..=n)
        .map(|i| {
            let z = i as f64 * table.step;
            proc.pi(z) * proc.h(z) * table.pair_sum(k, i)
        })
        .collect();
    let integral = *cumulative_simpson(&y, table.step).last().unwrap();
    let fact: f64 = (1..=k).map(|i| i as f64).product();
    Ok(fact * a.powf(k as f64 - proc.alpha) / (2.0 * proc.v_sq_norm.sqrt()) * integral)
}

/// Finite-`L` jump-moment estimate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FiniteJumpMoment {
    pub l: f64,
    pub n: f64,
    pub epsilon: f64,
    pub value: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JumpMomentTable {
    pub k: usize,
    pub a: f64,
    pub limit: f64,
    pub finite: Vec<FiniteJumpMoment>,
}

/// `mhat_{k,(N,A)} = k! / N^{gamma (k - alpha)} E_Pi[r h sum_j M^{j,eps}[1] M^{k-j,eps}[1]]`
/// at each solved length, with `N` from the cutoff geometry at `A` and
/// `delta_1 = 0.2`, next to the quadrature limit.
pub fn jump_moment(k: usize, a: f64, sols: &[SpectralSolution], n: usize, seed: u64) -> Result<JumpMomentTable> {
    let first = sols.first().ok_or_else(|| Error::Invalid("need at least one spectral solution".into()))?;
    if first.limit.regime() != Regime::SemiPushed {
        return Err(Error::Regime(format!("alpha = {} is not in (1, 2)", first.limit.alpha)));
    }
    if !(2..=4).contains(&k) {
        return Err(Error::Invalid(format!("jump moments need 2 <= k <= 4, got {k}")));
    }
    let proc = ReversedProcess::from_limit(&first.limit)?;
    let table = ReversedMomentTable::new(&proc, k, 1.0, 1.0 / 256.0)?;
    let limit = jump_moment_limit(&proc, k, a, &table)?;
    let fact: f64 = (1..=k).map(|i| i as f64).product();
    let mut finite = Vec::new();
    for (si, sol) in sols.iter().enumerate() {
        let lim = &sol.limit;
        let nn = CutoffGeometry::n_for_length(lim, sol.l, a);
        let geo = CutoffGeometry::new(lim, nn, a, 0.2)?;
        let eps = geo.epsilon;
        let gamma = geo.gamma;
        let scale = fact / nn.powf(gamma * (k as f64 - lim.alpha));
        let cfg = SpineConfig::new(sol)?;
        let (value, stderr) = if k == 2 {
            // M^{1,eps} = e^{-w eps}: the expectation is a deterministic integral.
            let e = sol.integrate(|x, v, _| v * v / sol.v1_sq_norm() * sol.rate_at(x) * sol.h_at(x));
            (scale * (-2.0 * sol.w * eps).exp() * e, 0.0)
        } else {
            let pi = PiSampler::new(&cfg.harmonics);
            let budget = KSpineBudget { outer: 1, strata: 4, child_divisor: 4, child_cap: 4, target_se: None, max_outer: 1 };
            let nested = Nested { cfg: &cfg, budget: &budget };
            let ones: Vec<Plan> = (1..k).map(|j| Plan::One(1.0).ones(j)).collect();
            let samples: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut rng = stream(seed, "jump-moment", ((si as u64) << 32) + i as u64);
                    let mut st = PathStats::default();
                    let y = pi.sample(&mut rng);
                    let mut sum = 0.0;
                    for j in 1..k {
                        let a = nested.sample(&ones[j - 1], eps, y, 1, 4, &mut st, &mut rng);
                        let b = nested.sample(&ones[k - j - 1], eps, y, 1, 4, &mut st, &mut rng);
                        sum += a * b;
                    }
                    cfg.rate(y) * cfg.harmonics.h(y) * sum
                })
                .collect();
            let acc = Accumulator::from_slice(&samples);
            (scale * acc.mean, scale * acc.stderr())
        };
        finite.push(FiniteJumpMoment { l: sol.l, n: nn, epsilon: eps, value, stderr });
    }
    Ok(JumpMomentTable { k, a, limit, finite })
}

/// Occupation density `int_0^T q_t(z, y) dt` of the reversed spine near `y`
/// (window of half-width `delta`), by Euler simulation of
/// `d zeta = beta coth(beta zeta) dt + dB`.
pub fn reversed_occupation(proc: &ReversedProcess, z: f64, y: f64, delta: f64, horizon: f64, dt: f64, n: usize, seed: u64) -> Accumulator {
    let beta = proc.beta;
    let samples: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, "reversed-occupation", i as u64);
            let (mut x, mut t, mut occ) = (z, 0.0, 0.0);
            while t < horizon {
                if (x - y).abs() < delta {
                    occ += dt;
                }
                let drift = beta / (beta * x).tanh();
                let nz: f64 = rng.sample(StandardNormal);
                let nx = x + drift * dt + dt.sqrt() * nz;
                x = if nx > 0.0 { nx } else { -nx };
                t += dt;
            }
            occ / (2.0 * delta)
        })
        .collect();
    Accumulator::from_slice(&samples)
}

/// Discounted occupation `int_0^T e^{-xi t} 1{|zeta_t - y| < delta} dt / (2 delta)`
/// of the spine started at `x`, one sample per replicate.
pub fn discounted_occupation(cfg: &SpineConfig, xi: f64, x: f64, y: f64, delta: f64, horizon: f64, n: usize, seed: u64) -> Result<(Accumulator, PathStats)> {
    if !(x > 0.0 && x < cfg.l) {
        return Err(Error::Domain(format!("x = {x} must lie in (0, {})", cfg.l)));
    }
    if !(xi > 0.0 && delta > 0.0 && horizon > 0.0) {
        return Err(Error::Invalid(format!("need xi, delta, horizon > 0 (got {xi}, {delta}, {horizon})")));
    }
    let dt = cfg.dt;
    let steps = (horizon / dt).ceil() as u64;
    let out: Vec<(f64, PathStats)> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, "spine-occupation", i);
            let mut st = PathStats::default();
            let (mut z, mut occ) = (x, 0.0);
            for j in 0..steps {
                let next = cfg.advance(z, dt, &mut st, &mut rng);
                // Trapezoid rule over the step.
                let t0 = j as f64 * dt;
                let a = if (z - y).abs() < delta { (-xi * t0).exp() } else { 0.0 };
                let b = if (next - y).abs() < delta { (-xi * (t0 + dt)).exp() } else { 0.0 };
                occ += 0.5 * (a + b) * dt;
                z = next;
            }
            (occ / (2.0 * delta), st)
        })
        .collect();
    let mut acc = Accumulator::new();
    let mut stats = PathStats::default();
    for (v, st) in &out {
        acc.push(*v);
        stats.merge(st);
    }
    Ok((acc, stats))
}
