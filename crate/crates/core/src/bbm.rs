//! Branching Brownian motion on `[0, L]` with drift `-mu`, branching rate
//! `r(x) = W(x)/2 + 1/2` and killing at both ends, and the reversed process
//! seen from the right boundary (drift `+mu`, rate `1/2`, killing at 0).

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functional::Functional;
use crate::quad::{integrate_piecewise, GaussLegendre};
use crate::rng::stream;
use crate::spectral::{LimitSolution, Potential, SpectralSolution};
use crate::stats::Accumulator;
use crate::ultrametric::{MarkedMatrix, Matrix, PlanarUltrametricMatrix};

/// Default population cap.
pub const PARTICLE_CAP: usize = 10_000_000;

/// Largest number of leaves for which a full genealogy matrix is built.
pub const MAX_MMM_LEAVES: usize = 4096;

/// Simulation parameters for the forward process.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BbmConfig {
    pub potential: Potential,
    pub mu: f64,
    pub l: f64,
    pub dt: f64,
    /// `r_max = (1 + max W) / 2`.
    pub rate_bound: f64,
    /// Kill with the Brownian-bridge crossing probability on top of the
    /// post-step exit test.
    pub bridge: bool,
    pub particle_cap: usize,
    /// Test hook: branching switched off.
    pub zero_rate: bool,
}

impl BbmConfig {
    pub fn new(potential: Potential, mu: f64, l: f64) -> Result<Self> {
        potential.validate()?;
        let rate_bound = 0.5 * (1.0 + potential.max_value());
        let dt = max_dt(rate_bound);
        let cfg = Self { potential, mu, l, dt, rate_bound, bridge: true, particle_cap: PARTICLE_CAP, zero_rate: false };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Configuration matching a solved spectral problem.
    pub fn from_solution(sol: &SpectralSolution) -> Result<Self> {
        Self::new(sol.potential.clone(), sol.mu, sol.l)
    }

    pub fn with_dt(mut self, dt: f64) -> Result<Self> {
        self.dt = dt;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l > 1.0) {
            return Err(Error::Invalid(format!("L must exceed 1, got {}", self.l)));
        }
        if !self.mu.is_finite() {
            return Err(Error::Invalid("drift must be finite".into()));
        }
        let cap = max_dt(self.rate_bound);
        if !(self.dt > 0.0 && self.dt <= cap * (1.0 + 1e-12)) {
            return Err(Error::Invalid(format!("dt = {} must lie in (0, {cap}]", self.dt)));
        }
        if self.particle_cap == 0 {
            return Err(Error::Invalid("particle cap must be positive".into()));
        }
        Ok(())
    }

    pub fn rate(&self, x: f64) -> f64 {
        if self.zero_rate {
            0.0
        } else {
            0.5 * self.potential.value(x) + 0.5
        }
    }
}

fn max_dt(rate_bound: f64) -> f64 {
    (1e-3f64).min(0.01 / rate_bound)
}

/// Harmonic functions tabulated for fast evaluation along trajectories.
#[derive(Clone, Debug)]
pub struct Harmonics {
    pub l: f64,
    pub mu: f64,
    pub w: f64,
    pub lambda1: f64,
    pub potential: Potential,
    step: f64,
    v: Vec<f64>,
    dv: Vec<f64>,
    /// `1 / (c_L ||v_1||^2)`.
    h_scale: f64,
    c_l: f64,
    limit: Option<LimitHarmonic>,
}

#[derive(Clone, Debug)]
struct LimitHarmonic {
    beta: f64,
    scale: f64,
    step: f64,
    /// `v_{1,inf}` on `[0, 1]`.
    v: Vec<f64>,
}

impl Harmonics {
    pub fn new(sol: &SpectralSolution) -> Self {
        let lim = &sol.limit;
        let limit = if lim.beta > 0.0 && lim.v_sq_norm.is_finite() && lim.c_inf > 0.0 {
            let n = 1024;
            let step = 1.0 / n as f64;
            Some(LimitHarmonic {
                beta: lim.beta,
                scale: 1.0 / (lim.c_inf * lim.v_sq_norm),
                step,
                v: (0..=n).map(|i| lim.v(i as f64 * step)).collect(),
            })
        } else {
            None
        };
        Self {
            l: sol.l,
            mu: sol.mu,
            w: sol.w,
            lambda1: sol.lambda1,
            potential: sol.potential.clone(),
            step: sol.h,
            v: sol.v1.clone(),
            dv: sol.dv1.clone(),
            h_scale: 1.0 / (sol.c_l * sol.v1_sq_norm()),
            c_l: sol.c_l,
            limit,
        }
    }

    /// `v_1(x)` by cubic Hermite interpolation of the grid samples.
    pub fn v1(&self, x: f64) -> f64 {
        let n = self.v.len() - 1;
        let s = (x / self.step).clamp(0.0, n as f64);
        let i = (s.floor() as usize).min(n - 1);
        let t = s - i as f64;
        let (y0, y1) = (self.v[i], self.v[i + 1]);
        let (d0, d1) = (self.dv[i] * self.step, self.dv[i + 1] * self.step);
        let t2 = t * t;
        let t3 = t2 * t;
        (2.0 * t3 - 3.0 * t2 + 1.0) * y0 + (t3 - 2.0 * t2 + t) * d0 + (-2.0 * t3 + 3.0 * t2) * y1 + (t3 - t2) * d1
    }

    /// `(v_1(x), v_1'(x))`, the derivative interpolated with `v_1'' = (2 lambda_1 - W) v_1`.
    pub fn v1_pair(&self, x: f64) -> (f64, f64) {
        let n = self.v.len() - 1;
        let s = (x / self.step).clamp(0.0, n as f64);
        let i = (s.floor() as usize).min(n - 1);
        let t = s - i as f64;
        let hs = self.step;
        let (x0, x1) = (i as f64 * hs, (i + 1) as f64 * hs);
        let dd0 = (2.0 * self.lambda1 - self.potential.value(x0)) * self.v[i];
        let dd1 = (2.0 * self.lambda1 - self.potential.value(x1)) * self.v[i + 1];
        let t2 = t * t;
        let t3 = t2 * t;
        let (a, b, c, d) = (2.0 * t3 - 3.0 * t2 + 1.0, t3 - 2.0 * t2 + t, -2.0 * t3 + 3.0 * t2, t3 - t2);
        let v = a * self.v[i] + b * self.dv[i] * hs + c * self.v[i + 1] + d * self.dv[i + 1] * hs;
        let dv = a * self.dv[i] + b * dd0 * hs + c * self.dv[i + 1] + d * dd1 * hs;
        (v, dv)
    }

    /// Grid spacing and samples of `v_1`.
    pub fn v1_samples(&self) -> (f64, &[f64]) {
        (self.step, &self.v)
    }

    /// `1 / (c_L ||v_1||^2)`.
    pub fn h_scale(&self) -> f64 {
        self.h_scale
    }

    pub fn h(&self, x: f64) -> f64 {
        if !(x > 0.0 && x < self.l) {
            return 0.0;
        }
        (self.mu * x).exp() * self.v1(x) * self.h_scale
    }

    pub fn h_tilde(&self, x: f64) -> f64 {
        if !(x > 0.0 && x < self.l) {
            return 0.0;
        }
        self.c_l * (-self.mu * x).exp() * self.v1(x)
    }

    /// `h_inf(x) = e^{mu x} v_{1,inf}(x) / (c_inf ||v_{1,inf}||^2)`, when the
    /// half-line problem has a positive decay rate.
    pub fn h_inf(&self, x: f64) -> Option<f64> {
        let lim = self.limit.as_ref()?;
        if !(x > 0.0) {
            return Some(0.0);
        }
        let v = if x >= 1.0 { (-lim.beta * (x - 1.0)).exp() } else { crate::quad::lerp_uniform(&lim.v, 0.0, lim.step, x) };
        Some((self.mu * x).exp() * v * lim.scale)
    }
}

/// One living particle.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Particle {
    pub id: usize,
    pub x: f64,
    pub parent: Option<usize>,
    pub birth: f64,
    /// Still inside `[0, L]`; only meaningful for coupled runs, where particles
    /// leaving through `L` stay alive in the half-line system.
    pub inside: bool,
}

/// Append-only genealogy record.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub parent: Option<usize>,
    pub birth: f64,
    /// 0 for the left child, 1 for the right child.
    pub side: u8,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParticleSystem {
    pub time: f64,
    pub particles: Vec<Particle>,
    pub log: Vec<LogRecord>,
    /// Absorbed at 0 and at `L` (for the `[0, L]` system).
    pub absorbed0: u64,
    pub absorbed_l: u64,
    /// Keep particles that cross `L` (coupling with the half-line system).
    pub coupled: bool,
    #[serde(skip)]
    scratch: Vec<Particle>,
}

impl ParticleSystem {
    pub fn new(x0: f64) -> Self {
        Self {
            time: 0.0,
            particles: vec![Particle { id: 0, x: x0, parent: None, birth: 0.0, inside: true }],
            log: vec![LogRecord { parent: None, birth: 0.0, side: 0 }],
            absorbed0: 0,
            absorbed_l: 0,
            coupled: false,
            scratch: Vec::new(),
        }
    }

    pub fn coupled(x0: f64) -> Self {
        Self { coupled: true, ..Self::new(x0) }
    }

    /// Population of the `[0, L]` system.
    pub fn size(&self) -> usize {
        if self.coupled {
            self.particles.iter().filter(|p| p.inside).count()
        } else {
            self.particles.len()
        }
    }

    /// Population of the half-line system in a coupled run.
    pub fn size_unbounded(&self) -> usize {
        self.particles.len()
    }

    pub fn is_extinct(&self) -> bool {
        self.size() == 0
    }

    fn inside_iter(&self) -> impl Iterator<Item = &Particle> {
        self.particles.iter().filter(|p| p.inside)
    }

    /// Positions of the `[0, L]` population.
    pub fn positions(&self) -> Vec<f64> {
        self.inside_iter().map(|p| p.x).collect()
    }

    /// Advances by one Euler step of length `cfg.dt`.
    pub fn step<R: Rng + ?Sized>(&mut self, cfg: &BbmConfig, rng: &mut R) -> Result<()> {
        let dt = cfg.dt;
        let sdt = dt.sqrt();
        let drift = -cfg.mu * dt;
        let p_max = -(-cfg.rate_bound * dt).exp_m1();
        let t_new = self.time + dt;
        let mut next = std::mem::take(&mut self.scratch);
        next.clear();
        for p in self.particles.iter() {
            let x0 = p.x;
            let z: f64 = rng.sample(StandardNormal);
            let x1 = x0 + drift + sdt * z;
            if x1 <= 0.0 || (cfg.bridge && bridge_crossed(x0, x1, dt, rng)) {
                if p.inside {
                    self.absorbed0 += 1;
                }
                continue;
            }
            let mut inside = p.inside;
            if inside && (x1 >= cfg.l || (cfg.bridge && bridge_crossed(cfg.l - x0, cfg.l - x1, dt, rng))) {
                self.absorbed_l += 1;
                if !self.coupled {
                    continue;
                }
                inside = false;
            }
            let u: f64 = rng.random();
            let branches = u < p_max && !cfg.zero_rate && u < -(-cfg.rate(x1) * dt).exp_m1();
            if branches {
                for side in 0..2u8 {
                    let id = self.log.len();
                    self.log.push(LogRecord { parent: Some(p.id), birth: t_new, side });
                    next.push(Particle { id, x: x1, parent: Some(p.id), birth: t_new, inside });
                }
            } else {
                next.push(Particle { x: x1, inside, ..*p });
            }
        }
        self.scratch = std::mem::replace(&mut self.particles, next);
        self.time = t_new;
        if self.particles.len() > cfg.particle_cap {
            return Err(Error::Explosion(self.particles.len()));
        }
        Ok(())
    }

    /// Log indices from the root down to `id`.
    fn lineage(&self, id: usize) -> Vec<usize> {
        let mut out = vec![id];
        let mut cur = id;
        while let Some(p) = self.log[cur].parent {
            out.push(p);
            cur = p;
        }
        out.reverse();
        out
    }

    /// Indices into `particles` (of the `[0, L]` population) in planar order:
    /// lexicographic in the left/right choices along each lineage.
    pub fn planar_order(&self) -> (Vec<usize>, Vec<Vec<usize>>) {
        let mut items: Vec<(usize, Vec<usize>)> =
            self.particles.iter().enumerate().filter(|(_, p)| p.inside).map(|(i, p)| (i, self.lineage(p.id))).collect();
        items.sort_by(|a, b| {
            let sa = a.1.iter().map(|&r| self.log[r].side);
            let sb = b.1.iter().map(|&r| self.log[r].side);
            sa.cmp(sb)
        });
        items.into_iter().unzip()
    }

    /// Split time of two lineages (root-first log paths).
    fn split_time(&self, a: &[usize], b: &[usize]) -> f64 {
        let i = a.iter().zip(b).position(|(x, y)| x != y).unwrap_or(a.len().min(b.len()));
        if i < a.len() {
            self.log[a[i]].birth
        } else {
            self.log[b[i]].birth
        }
    }

    /// Genealogy of the current `[0, L]` population: planar distance matrix
    /// (time since the most recent common ancestor), positions as marks.
    pub fn mmm_sample(&self, weights: SampleWeights, harmonics: Option<&Harmonics>) -> Result<MmmSample> {
        let n = self.size();
        if n > MAX_MMM_LEAVES {
            return Err(Error::TooManyLeaves(n));
        }
        let (order, paths) = self.planar_order();
        let marks: Vec<f64> = order.iter().map(|&i| self.particles[i].x).collect();
        let depths: Vec<f64> = paths.windows(2).map(|w| self.time - self.split_time(&w[0], &w[1])).collect();
        let matrix = if n == 0 { Matrix::zeros(0) } else { PlanarUltrametricMatrix::from_depths(&depths)?.into_matrix() };
        let weights = match weights {
            SampleWeights::Uniform { scale } => vec![scale; n],
            SampleWeights::HBiased => {
                let h = harmonics.ok_or_else(|| Error::Invalid("h-biased weights need harmonic functions".into()))?;
                marks.iter().map(|&x| h.h(x)).collect()
            }
        };
        Ok(MmmSample { matrix: MarkedMatrix::new(matrix, marks)?, total_size: n, weights })
    }

    /// Distance matrix and marks of the given particle indices, in the given order.
    pub fn tuple_matrix(&self, idx: &[usize]) -> MarkedMatrix {
        let paths: Vec<Vec<usize>> = idx.iter().map(|&i| self.lineage(self.particles[i].id)).collect();
        marked_from_paths(self, &paths, idx.iter().map(|&i| self.particles[i].x).collect())
    }
}

fn marked_from_paths(sys: &ParticleSystem, paths: &[Vec<usize>], marks: Vec<f64>) -> MarkedMatrix {
    let k = paths.len();
    let mut m = Matrix::zeros(k);
    for i in 0..k {
        for j in i + 1..k {
            let d = sys.time - sys.split_time(&paths[i], &paths[j]);
            m.set(i, j, d);
            m.set(j, i, d);
        }
    }
    MarkedMatrix { matrix: m, marks }
}

/// Brownian bridge between two points above a barrier at 0 dips below it
/// with probability `exp(-2 a b / dt)`.
fn bridge_crossed<R: Rng + ?Sized>(a: f64, b: f64, dt: f64, rng: &mut R) -> bool {
    if a <= 0.0 || b <= 0.0 {
        return true;
    }
    let e = 2.0 * a * b / dt;
    if e > 40.0 {
        return false;
    }
    rng.random::<f64>() < (-e).exp()
}

/// Sampling measure attached to a genealogy.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub enum SampleWeights {
    /// Every particle carries `scale` (typically `N^{-gamma}`).
    Uniform { scale: f64 },
    /// Particle `v` carries `h(X_v)`.
    HBiased,
}

/// Marked genealogy of a population with its sampling weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MmmSample {
    pub matrix: MarkedMatrix,
    pub total_size: usize,
    pub weights: Vec<f64>,
}

/// One row of the observation schedule.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Observation {
    pub t: f64,
    pub z: usize,
    pub z_unbounded: usize,
    pub w_additive: f64,
    pub w_inf: Option<f64>,
    pub absorbed0: u64,
    pub absorbed_l: u64,
    pub histogram: Option<Vec<u64>>,
}

/// What `run` records at each scheduled time.
#[derive(Clone, Debug, Default)]
pub struct Observables<'a> {
    pub harmonics: Option<&'a Harmonics>,
    pub histogram_bins: usize,
    pub coupled: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub series: Vec<Observation>,
    pub system: ParticleSystem,
}

fn observe(sys: &ParticleSystem, cfg: &BbmConfig, obs: &Observables) -> Observation {
    let mut o = Observation {
        t: sys.time,
        z: sys.size(),
        z_unbounded: sys.size_unbounded(),
        absorbed0: sys.absorbed0,
        absorbed_l: sys.absorbed_l,
        ..Default::default()
    };
    if let Some(h) = obs.harmonics {
        o.w_additive = sys.inside_iter().map(|p| h.h(p.x)).sum();
        o.w_inf = h.limit.as_ref().map(|_| sys.inside_iter().map(|p| h.h_inf(p.x).unwrap_or(0.0)).sum());
    }
    if obs.histogram_bins > 0 {
        let nb = obs.histogram_bins;
        let mut hist = vec![0u64; nb];
        for p in sys.inside_iter() {
            let b = ((p.x / cfg.l * nb as f64) as usize).min(nb - 1);
            hist[b] += 1;
        }
        o.histogram = Some(hist);
    }
    o
}

/// Simulates from one particle at `x0` up to `horizon`, recording the
/// observables at the schedule times (rounded to the step grid). The step is
/// shrunk so the horizon is a whole number of steps.
pub fn run<R: Rng + ?Sized>(cfg: &BbmConfig, x0: f64, horizon: f64, schedule: &[f64], obs: &Observables, rng: &mut R) -> Result<RunOutput> {
    if !(x0 > 0.0 && x0 < cfg.l) {
        return Err(Error::Domain(format!("x0 = {x0} must lie in (0, {})", cfg.l)));
    }
    if !(horizon >= 0.0) {
        return Err(Error::Invalid(format!("horizon must be >= 0, got {horizon}")));
    }
    let steps = (horizon / cfg.dt).ceil() as usize;
    let mut local = cfg.clone();
    if steps > 0 {
        local.dt = horizon / steps as f64;
    }
    let mut marks: Vec<usize> = schedule.iter().map(|&t| ((t.clamp(0.0, horizon) / local.dt).round() as usize).min(steps)).collect();
    marks.sort_unstable();
    let mut sys = if obs.coupled { ParticleSystem::coupled(x0) } else { ParticleSystem::new(x0) };
    let mut series = Vec::with_capacity(marks.len());
    let mut next = 0;
    for j in 0..=steps {
        while next < marks.len() && marks[next] == j {
            let mut o = observe(&sys, &local, obs);
            o.t = j as f64 * local.dt;
            series.push(o);
            next += 1;
        }
        if j == steps || sys.particles.is_empty() {
            if sys.particles.is_empty() {
                while next < marks.len() {
                    let mut o = observe(&sys, &local, obs);
                    o.t = marks[next] as f64 * local.dt;
                    series.push(o);
                    next += 1;
                }
                sys.time = horizon;
            }
            break;
        }
        sys.step(&local, rng)?;
    }
    Ok(RunOutput { series, system: sys })
}

/// Final state after `horizon` without observations.
pub fn run_to<R: Rng + ?Sized>(cfg: &BbmConfig, x0: f64, horizon: f64, coupled: bool, rng: &mut R) -> Result<ParticleSystem> {
    let obs = Observables { coupled, ..Default::default() };
    Ok(run(cfg, x0, horizon, &[], &obs, rng)?.system)
}

/// Independent replicates mapped through `f`, each on its own stream.
pub fn replicates<T, F>(cfg: &BbmConfig, x0: f64, horizon: f64, n: usize, seed: u64, label: &str, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&ParticleSystem) -> T + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, label, i as u64);
            let sys = run_to(cfg, x0, horizon, false, &mut rng)?;
            Ok(f(&sys))
        })
        .collect()
}

/// Sum over ordered `k`-tuples of distinct indices of `prod_i a_{v_i}`, from
/// the power sums of `a`.
pub fn distinct_tuple_sum(a: &[f64], k: usize) -> f64 {
    let p = |m: i32| a.iter().map(|x| x.powi(m)).sum::<f64>();
    match k {
        0 => 1.0,
        1 => p(1),
        2 => {
            let p1 = p(1);
            p1 * p1 - p(2)
        }
        3 => {
            let (p1, p2, p3) = (p(1), p(2), p(3));
            p1.powi(3) - 3.0 * p1 * p2 + 2.0 * p3
        }
        4 => {
            let (p1, p2, p3, p4) = (p(1), p(2), p(3), p(4));
            p1.powi(4) - 6.0 * p1 * p1 * p2 + 3.0 * p2 * p2 + 8.0 * p1 * p3 - 6.0 * p4
        }
        _ => f64::NAN,
    }
}

/// Largest number of ordered tuples enumerated per replicate for a general functional.
const TUPLE_CAP: f64 = 1e7;

/// Estimates `E_x[sum over distinct ordered k-tuples of G(d_t(v), x) prod_i h(X_{v_i}(t))]`.
pub fn many_to_few_lhs(
    cfg: &BbmConfig,
    harmonics: &Harmonics,
    x0: f64,
    k: usize,
    t: f64,
    g: &Functional,
    n: usize,
    seed: u64,
) -> Result<Accumulator> {
    if !(1..=4).contains(&k) {
        return Err(Error::Invalid(format!("many-to-few needs 1 <= k <= 4, got {k}")));
    }
    if g.k() != k {
        return Err(Error::Shape(format!("functional accepts {} leaves, not {k}", g.k())));
    }
    let constant = match g {
        Functional::Constant { value, .. } => Some(*value),
        _ => None,
    };
    let samples: Result<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, "bbm-many-to-few", i as u64);
            let sys = run_to(cfg, x0, t, false, &mut rng)?;
            let hs: Vec<f64> = sys.particles.iter().map(|p| harmonics.h(p.x)).collect();
            if let Some(v) = constant {
                return Ok(v * distinct_tuple_sum(&hs, k));
            }
            general_tuple_sum(&sys, &hs, k, g)
        })
        .collect();
    Ok(Accumulator::from_slice(&samples?))
}

fn general_tuple_sum(sys: &ParticleSystem, hs: &[f64], k: usize, g: &Functional) -> Result<f64> {
    let m = sys.particles.len();
    if m < k {
        return Ok(0.0);
    }
    if (m as f64).powi(k as i32) > TUPLE_CAP {
        return Err(Error::TooManyLeaves(m));
    }
    let paths: Vec<Vec<usize>> = sys.particles.iter().map(|p| sys.lineage(p.id)).collect();
    let mut idx = vec![0usize; k];
    let mut total = 0.0;
    fn rec(depth: usize, idx: &mut Vec<usize>, m: usize, f: &mut dyn FnMut(&[usize])) {
        if depth == idx.len() {
            f(idx);
            return;
        }
        for v in 0..m {
            if idx[..depth].contains(&v) {
                continue;
            }
            idx[depth] = v;
            rec(depth + 1, idx, m, f);
        }
    }
    rec(0, &mut idx, m, &mut |tuple: &[usize]| {
        let w: f64 = tuple.iter().map(|&i| hs[i]).product();
        if w == 0.0 {
            return;
        }
        let ps: Vec<Vec<usize>> = tuple.iter().map(|&i| paths[i].clone()).collect();
        let mm = marked_from_paths(sys, &ps, tuple.iter().map(|&i| sys.particles[i].x).collect());
        total += w * g.eval(&mm);
    });
    Ok(total)
}

// ---------------------------------------------------------------------------
// Reversed process

/// Closed forms of the reversed process: `v(z) = 2 e^beta sinh(beta z)`,
/// `h(z) = e^{-mu z} v(z) / (c_inf ||v_{1,inf}||^2)`,
/// `h~(z) = c_inf e^{mu z} v(z)` and `Pi(z) = h h~ = v^2 / ||v_{1,inf}||^2`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReversedProcess {
    pub mu: f64,
    pub beta: f64,
    pub c_inf: f64,
    pub v_sq_norm: f64,
    pub alpha: f64,
    pub particle_cap: usize,
}

impl ReversedProcess {
    pub fn new(mu: f64, beta: f64, c_inf: f64, v_sq_norm: f64) -> Result<Self> {
        if !(beta > 0.0 && mu > beta) {
            return Err(Error::Regime(format!("reversed process needs 0 < beta < mu, got beta = {beta}, mu = {mu}")));
        }
        if !(c_inf > 0.0 && v_sq_norm > 0.0 && v_sq_norm.is_finite()) {
            return Err(Error::Invalid("normalizing constants must be positive and finite".into()));
        }
        Ok(Self { mu, beta, c_inf, v_sq_norm, alpha: (mu + beta) / (mu - beta), particle_cap: PARTICLE_CAP })
    }

    pub fn from_limit(lim: &LimitSolution) -> Result<Self> {
        Self::new(lim.mu, lim.beta, lim.c_inf, lim.v_sq_norm)
    }

    pub fn v(&self, z: f64) -> f64 {
        2.0 * self.beta.exp() * (self.beta * z).sinh()
    }

    pub fn h(&self, z: f64) -> f64 {
        if !(z > 0.0) {
            return 0.0;
        }
        // e^{beta} (e^{(beta - mu) z} - e^{-(beta + mu) z}), overflow free.
        let b = self.beta;
        b.exp() * (((b - self.mu) * z).exp() - (-(b + self.mu) * z).exp()) / (self.c_inf * self.v_sq_norm)
    }

    pub fn h_tilde(&self, z: f64) -> f64 {
        self.c_inf * (self.mu * z).exp() * self.v(z)
    }

    pub fn pi(&self, z: f64) -> f64 {
        self.v(z).powi(2) / self.v_sq_norm
    }

    /// `sup_z h(z)`, attained at `tanh(beta z) = beta / mu`.
    pub fn h_sup(&self) -> f64 {
        self.h((self.beta / self.mu).atanh() / self.beta)
    }

    /// `G(z, y) = v(y)^2 int_{max(z, y)}^inf v(s)^{-2} ds
    ///          = sinh^2(beta y) (coth(beta max(z, y)) - 1) / beta`.
    pub fn green(&self, z: f64, y: f64) -> Result<f64> {
        check_positive(z, y)?;
        let b = self.beta;
        let m = z.max(y);
        let ey = (-2.0 * b * y).exp();
        let em = (-2.0 * b * m).exp();
        Ok((1.0 - ey).powi(2) * (2.0 * b * (y - m)).exp() / (2.0 * b * (1.0 - em)))
    }

    /// The defining integral of `green` by quadrature, geometric panels near
    /// the lower limit and a cut at `m + 40 / beta`.
    pub fn green_quadrature(&self, z: f64, y: f64) -> Result<f64> {
        check_positive(z, y)?;
        let b = self.beta;
        let m = z.max(y);
        let hi = m + 40.0 / b;
        let mut breaks = Vec::new();
        let mut x = m;
        while x < m + 1.0 / b {
            x *= 2.0;
            breaks.push(x);
        }
        let rule = GaussLegendre::new(24);
        let mut pts = vec![m];
        pts.extend(breaks.into_iter().filter(|&p| p < hi));
        pts.push(hi);
        let w = 0.25 / b;
        let mut tail = 0.0;
        for seg in pts.windows(2) {
            let panels = ((seg[1] - seg[0]) / w).ceil().max(1.0) as usize;
            let step = (seg[1] - seg[0]) / panels as f64;
            for p in 0..panels {
                let a = seg[0] + p as f64 * step;
                tail += rule.integrate(a, a + step, |s| self.v(s).powi(-2));
            }
        }
        Ok(self.v(y).powi(2) * tail)
    }

    /// Occupation density of the reversed spine, `int_0^inf q_t(z, y) dt`,
    /// which is twice `green`: the spine has scale density `sinh^{-2}(beta s)`
    /// and speed density `2 sinh^2(beta y)`.
    pub fn spine_occupation(&self, z: f64, y: f64) -> Result<f64> {
        Ok(2.0 * self.green(z, y)?)
    }

    /// Mean particle density `p_u(z, y)` of the reversed branching process.
    pub fn mean_density(&self, u: f64, z: f64, y: f64) -> f64 {
        if !(u > 0.0 && z > 0.0 && y > 0.0) {
            return 0.0;
        }
        let g = |d: f64| (-d * d / (2.0 * u)).exp() / (2.0 * std::f64::consts::PI * u).sqrt();
        (-self.beta * self.beta * u / 2.0 + self.mu * (y - z)).exp() * (g(y - z) - g(y + z))
    }

    /// `int_0^inf p_u(z, y) f(y) dy`.
    fn mean_integral<F: Fn(f64) -> f64>(&self, u: f64, z: f64, f: F) -> f64 {
        let sd = u.sqrt();
        let hi = z + self.mu * u + 14.0 * sd + 1.0;
        let width = (0.5 * sd).clamp(1e-3, 0.5);
        let breaks: Vec<f64> = [z - 8.0 * sd, z, z + 8.0 * sd].into_iter().filter(|&p| p > 0.0).collect();
        integrate_piecewise(0.0, hi, &breaks, width, |y| self.mean_density(u, z, y) * f(y))
    }

    /// `(M^{2,T}_z[1], E_z[sum_v h(X_v(T))^2] / (2 h(z)))`: the finite-horizon
    /// two-spine mass and the diagonal term, so that
    /// `E_z[W_T^2] / (2 h(z))` is their sum.
    pub fn second_moment_finite(&self, z: f64, horizon: f64) -> Result<(f64, f64)> {
        if !(z > 0.0) {
            return Err(Error::SingularArgument(format!("z = {z} must be positive")));
        }
        let hz = self.h(z);
        let h2 = |y: f64| self.h(y).powi(2);
        let mut breaks: Vec<f64> = (0..20).map(|j| horizon * 0.5f64.powi(20 - j)).collect();
        breaks.push(1.0);
        let inner = |u: f64| if u <= 0.0 { h2(z) } else { self.mean_integral(u, z, h2) };
        let off = integrate_piecewise(0.0, horizon, &breaks, 0.25, inner) / (2.0 * hz);
        let diag = inner(horizon) / (2.0 * hz);
        Ok((off, diag))
    }
}

fn check_positive(z: f64, y: f64) -> Result<()> {
    if !(z > 0.0 && y > 0.0) {
        return Err(Error::SingularArgument(format!("reversed Green function needs z, y > 0 (got {z}, {y})")));
    }
    Ok(())
}

/// Time series of one reversed replicate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReversedRun {
    pub times: Vec<f64>,
    /// `W_t = sum_v h(X_v(t))` at the schedule times.
    pub w: Vec<f64>,
    pub alive: Vec<u64>,
    /// Lowest position visited up to each schedule time (exact bridge minima).
    pub running_min: Vec<f64>,
}

impl ReversedRun {
    pub fn final_w(&self) -> f64 {
        *self.w.last().unwrap_or(&0.0)
    }

    /// `W` at the first schedule time `>= t`.
    pub fn w_at(&self, t: f64) -> f64 {
        let i = self.times.iter().position(|&s| s >= t - 1e-12).unwrap_or(self.times.len() - 1);
        self.w[i]
    }
}

/// Simulates the reversed process exactly between events: exponential
/// lifetimes of rate 1/2, Gaussian increments with drift `mu`, and killing
/// when the Brownian-bridge minimum of a segment reaches 0. The horizon is
/// always part of the schedule.
pub fn run_reversed<R: Rng + ?Sized>(proc: &ReversedProcess, z0: f64, horizon: f64, schedule: &[f64], rng: &mut R) -> Result<ReversedRun> {
    if !(z0 > 0.0) {
        return Err(Error::Domain(format!("z0 = {z0} must be positive")));
    }
    if !(horizon > 0.0) {
        return Err(Error::Invalid(format!("horizon must be positive, got {horizon}")));
    }
    let mut times: Vec<f64> = schedule.iter().copied().filter(|&t| t > 0.0 && t < horizon).collect();
    times.push(horizon);
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup();
    let nt = times.len();
    let mut w = vec![0.0; nt];
    let mut alive = vec![0u64; nt];
    let mut seg_min = vec![f64::INFINITY; nt];
    let life = Exp::new(0.5).unwrap();
    let mu = proc.mu;
    // (start time, position, index of the first schedule time after start)
    let mut stack: Vec<(f64, f64, usize)> = vec![(0.0, z0, 0)];
    let mut spawned: usize = 1;
    while let Some((t0, x0, mut next)) = stack.pop() {
        let t_end = (t0 + life.sample(rng)).min(horizon);
        let (mut t, mut x) = (t0, x0);
        let mut killed = false;
        loop {
            let target = if next < nt && times[next] <= t_end { times[next] } else { t_end };
            let dt = target - t;
            if dt > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                let x1 = x + mu * dt + dt.sqrt() * z;
                let u: f64 = rng.random();
                let d = x1 - x;
                let m = 0.5 * (x + x1 - (d * d - 2.0 * dt * (1.0 - u).ln()).sqrt());
                let slot = next.min(nt - 1);
                if m < seg_min[slot] {
                    seg_min[slot] = m.max(0.0);
                }
                if m <= 0.0 {
                    killed = true;
                    break;
                }
                x = x1;
                t = target;
            }
            if next < nt && times[next] == target {
                w[next] += proc.h(x);
                alive[next] += 1;
                next += 1;
            }
            if target >= t_end {
                break;
            }
        }
        if !killed && t_end < horizon {
            stack.push((t_end, x, next));
            stack.push((t_end, x, next));
            spawned += 2;
            if stack.len() > proc.particle_cap || spawned > 20 * proc.particle_cap {
                return Err(Error::Explosion(stack.len()));
            }
        }
    }
    let mut running_min = vec![z0; nt];
    let mut acc = z0;
    for i in 0..nt {
        acc = acc.min(seg_min[i]);
        running_min[i] = acc;
    }
    if alive.iter().any(|&a| a as usize > proc.particle_cap) {
        return Err(Error::Explosion(*alive.iter().max().unwrap() as usize));
    }
    Ok(ReversedRun { times, w, alive, running_min })
}

/// Estimated moments of `W_T` from one starting point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LambdaRow {
    pub z: f64,
    pub horizon: f64,
    /// `E_z[W_T^k]`, `k = 1..=4`.
    pub moments: [f64; 4],
    pub moments_se: [f64; 4],
    /// `h~(z) E_z[W_T^k] = k! Pi(z) M^{k,T}_z[1]`.
    pub scaled: [f64; 4],
    /// `E|W_T - W_{0.9 T}| / E W_T`.
    pub relative_drift: f64,
}

/// Moment table of `h~(z) law(W_inf)` from replicates at horizon `T`,
/// rejecting horizons over which the martingale still moves by 1% or more.
pub fn lambda_estimator(proc: &ReversedProcess, z_list: &[f64], horizon: f64, n: usize, seed: u64) -> Result<Vec<LambdaRow>> {
    if n < 2 {
        return Err(Error::InsufficientStatistics(format!("need at least 2 replicates, got {n}")));
    }
    z_list
        .iter()
        .enumerate()
        .map(|(zi, &z)| {
            let pairs: Result<Vec<(f64, f64)>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut rng = stream(seed, "reversed-lambda", (zi * n + i) as u64);
                    let r = run_reversed(proc, z, horizon, &[0.9 * horizon], &mut rng)?;
                    Ok((r.w[0], r.final_w()))
                })
                .collect();
            let pairs = pairs?;
            let mean_w = pairs.iter().map(|p| p.1).sum::<f64>() / n as f64;
            let drift = pairs.iter().map(|p| (p.1 - p.0).abs()).sum::<f64>() / n as f64 / mean_w;
            if !(drift < 0.01) {
                return Err(Error::HorizonTooShort(format!(
                    "relative drift of W over the last tenth of T = {horizon} is {drift:.3e} at z = {z}"
                )));
            }
            let mut moments = [0.0; 4];
            let mut moments_se = [0.0; 4];
            let mut scaled = [0.0; 4];
            for k in 0..4 {
                let acc = Accumulator::from_slice(&pairs.iter().map(|p| p.1.powi(k as i32 + 1)).collect::<Vec<_>>());
                moments[k] = acc.mean;
                moments_se[k] = acc.stderr();
                scaled[k] = proc.h_tilde(z) * acc.mean;
            }
            Ok(LambdaRow { z, horizon, moments, moments_se, scaled, relative_drift: drift })
        })
        .collect()
}
