//! Principal eigenpair of `1/2 v'' + 1/2 W v = lambda v` on `[0, L]` with
//! Dirichlet boundary conditions, the harmonic functions built from it, the
//! resolvent (Green function) of the spine and the cutoff geometry.
//!
//! Piecewise-constant potentials are propagated with exact 2x2 transfer
//! matrices, so the shooting residual is at rounding level. Tabulated
//! potentials use classical RK4 between their nodes.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::quad::{self, linear_fit};

/// Branching-rate potential `W`, supported in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Potential {
    Zero,
    /// `W = height` on `[0, edge)`, zero afterwards.
    Step { height: f64, edge: f64 },
    /// Piecewise-linear interpolation of `(xs[i], ws[i])`, zero outside `[xs[0], xs[n-1]]`.
    Tabulated { xs: Vec<f64>, ws: Vec<f64> },
}

impl Potential {
    pub fn step(height: f64) -> Self {
        Potential::Step { height, edge: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Potential::Zero => Ok(()),
            Potential::Step { height, edge } => {
                if !(height.is_finite() && *height >= 0.0) {
                    return Err(Error::Invalid(format!("step height must be >= 0, got {height}")));
                }
                if !(*edge > 0.0 && *edge <= 1.0) {
                    return Err(Error::Invalid(format!("step edge must lie in (0, 1], got {edge}")));
                }
                Ok(())
            }
            Potential::Tabulated { xs, ws } => {
                if xs.len() != ws.len() || xs.len() < 2 {
                    return Err(Error::Invalid("tabulated potential needs >= 2 matching (x, W) pairs".into()));
                }
                if xs.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Invalid("tabulated grid must be strictly increasing".into()));
                }
                if xs[0] < 0.0 || xs[xs.len() - 1] > 1.0 {
                    return Err(Error::Invalid("tabulated grid must lie in [0, 1]".into()));
                }
                if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                    return Err(Error::Invalid("tabulated values must be finite and >= 0".into()));
                }
                Ok(())
            }
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::Step { height, edge } => {
                if (0.0..*edge).contains(&x) {
                    *height
                } else {
                    0.0
                }
            }
            Potential::Tabulated { xs, ws } => {
                let n = xs.len();
                if x < xs[0] || x > xs[n - 1] {
                    return 0.0;
                }
                let i = match xs.binary_search_by(|p| p.partial_cmp(&x).unwrap()) {
                    Ok(i) => return ws[i],
                    Err(i) => i - 1,
                };
                let t = (x - xs[i]) / (xs[i + 1] - xs[i]);
                ws[i] * (1.0 - t) + ws[i + 1] * t
            }
        }
    }

    pub fn max_value(&self) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::Step { height, .. } => *height,
            Potential::Tabulated { ws, .. } => ws.iter().copied().fold(0.0, f64::max),
        }
    }

    /// Points in `[0, 1]` where the ODE coefficient is not smooth, plus 0 and 1.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b = vec![0.0, 1.0];
        match self {
            Potential::Zero => {}
            Potential::Step { edge, .. } => b.push(*edge),
            Potential::Tabulated { xs, .. } => b.extend(xs.iter().copied()),
        }
        b.sort_by(|a, c| a.partial_cmp(c).unwrap());
        b.dedup();
        b
    }

    fn constant_on(&self, a: f64, b: f64) -> Option<f64> {
        let mid = 0.5 * (a + b);
        match self {
            Potential::Zero | Potential::Step { .. } => Some(self.value(mid)),
            Potential::Tabulated { xs, .. } => {
                if mid > 1.0 || mid < xs[0] || mid > xs[xs.len() - 1] {
                    Some(0.0)
                } else {
                    let (wa, wb) = (self.value(a), self.value(b));
                    if wa == wb {
                        Some(wa)
                    } else {
                        None
                    }
                }
            }
        }
    }

    /// Step of width `edge` whose half-line principal eigenvalue gives the
    /// requested `alpha = (mu + beta) / (mu - beta)`.
    pub fn step_for_alpha(alpha: f64, edge: f64) -> Result<Self> {
        if !(alpha > 1.0 && alpha.is_finite()) {
            return Err(Error::Invalid(format!("alpha must exceed 1, got {alpha}")));
        }
        let beta = beta_from_alpha(alpha);
        let lam = 0.5 * beta * beta;
        // Inside the step, v = sin(q x); matching with exp(-beta x) at the edge
        // gives q cot(q edge) = -beta with q in (pi / (2 edge), pi / edge).
        let f = |q: f64| q * (q * edge).cos() + beta * (q * edge).sin();
        let q = quad::brent(f, PI / (2.0 * edge), PI / edge * (1.0 - 1e-12), 1e-15, 200)
            .ok_or_else(|| Error::Bracket("no step height matches the requested alpha".into()))?;
        Ok(Potential::Step { height: q * q + 2.0 * lam, edge })
    }
}

/// `beta` such that `(mu + beta) / (mu - beta) = alpha` with `mu^2 = 1 + beta^2`.
pub fn beta_from_alpha(alpha: f64) -> f64 {
    let rho = (alpha + 1.0) / (alpha - 1.0);
    1.0 / (rho * rho - 1.0).sqrt()
}

/// Transfer coefficients over a length `s` for `v'' = k2 v`:
/// returns `(c, sh)` with `v(s) = c v + sh v'` and `v'(s) = k2 sh v + c v'`.
#[inline]
pub(crate) fn transfer(k2: f64, s: f64) -> (f64, f64) {
    if k2 > 0.0 {
        let k = k2.sqrt();
        let ks = k * s;
        (ks.cosh(), ks.sinh() / k)
    } else if k2 < 0.0 {
        let k = (-k2).sqrt();
        let ks = k * s;
        (ks.cos(), ks.sin() / k)
    } else {
        (1.0, s)
    }
}

/// `sinh(sqrt(2 lambda) y) / sqrt(2 lambda)`, analytically continued through
/// `lambda = 0`.
#[inline]
pub fn shyp(lambda: f64, y: f64) -> f64 {
    transfer(2.0 * lambda, y).1
}

/// Integrator for `v'' = (2 lambda - W(x)) v` across the pieces of `W`.
#[derive(Clone, Debug)]
pub(crate) struct Ode {
    pot: Potential,
    breaks: Vec<f64>,
    h_max: f64,
}

impl Ode {
    pub(crate) fn new(pot: &Potential, h_max: f64) -> Self {
        Self { pot: pot.clone(), breaks: pot.breakpoints(), h_max }
    }

    fn next_break(&self, x: f64) -> f64 {
        self.breaks.iter().copied().find(|&b| b > x).unwrap_or(f64::INFINITY)
    }

    fn prev_break(&self, x: f64) -> f64 {
        self.breaks.iter().rev().copied().find(|&b| b < x).unwrap_or(f64::NEG_INFINITY)
    }

    /// Propagates `(v, v')` from `x0` to `x1` (either direction).
    pub(crate) fn propagate(&self, lambda: f64, x0: f64, state: (f64, f64), x1: f64) -> (f64, f64) {
        let (mut v, mut dv) = state;
        let mut cur = x0;
        let forward = x1 >= x0;
        while (forward && cur < x1) || (!forward && cur > x1) {
            let next = if forward { self.next_break(cur).min(x1) } else { self.prev_break(cur).max(x1) };
            let (a, b) = if forward { (cur, next) } else { (next, cur) };
            match self.pot.constant_on(a, b) {
                Some(w) => {
                    let k2 = 2.0 * lambda - w;
                    let (c, sh) = transfer(k2, next - cur);
                    let nv = c * v + sh * dv;
                    let ndv = k2 * sh * v + c * dv;
                    v = nv;
                    dv = ndv;
                }
                None => {
                    let steps = ((next - cur).abs() / self.h_max).ceil().max(1.0) as usize;
                    let h = (next - cur) / steps as f64;
                    let mut x = cur;
                    for _ in 0..steps {
                        let (nv, ndv) = self.rk4(lambda, x, v, dv, h);
                        v = nv;
                        dv = ndv;
                        x += h;
                    }
                }
            }
            cur = next;
        }
        (v, dv)
    }

    fn rk4(&self, lambda: f64, x: f64, v: f64, dv: f64, h: f64) -> (f64, f64) {
        let k2 = |x: f64| 2.0 * lambda - self.pot.value(x);
        let a1 = (dv, k2(x) * v);
        let a2 = (dv + 0.5 * h * a1.1, k2(x + 0.5 * h) * (v + 0.5 * h * a1.0));
        let a3 = (dv + 0.5 * h * a2.1, k2(x + 0.5 * h) * (v + 0.5 * h * a2.0));
        let a4 = (dv + h * a3.1, k2(x + h) * (v + h * a3.0));
        (
            v + h / 6.0 * (a1.0 + 2.0 * a2.0 + 2.0 * a3.0 + a4.0),
            dv + h / 6.0 * (a1.1 + 2.0 * a2.1 + 2.0 * a3.1 + a4.1),
        )
    }

    /// Samples the solution from `(0, 1)` at `x_i = i h`, `i = 0..=n`.
    fn sample(&self, lambda: f64, h: f64, n: usize, init: (f64, f64)) -> (Vec<f64>, Vec<f64>) {
        let mut v = Vec::with_capacity(n + 1);
        let mut dv = Vec::with_capacity(n + 1);
        let mut s = init;
        v.push(s.0);
        dv.push(s.1);
        for i in 1..=n {
            s = self.propagate(lambda, (i - 1) as f64 * h, s, i as f64 * h);
            v.push(s.0);
            dv.push(s.1);
        }
        (v, dv)
    }

    /// True iff the solution from `v(0) = 0, v'(0) = 1` is positive at every grid
    /// point of `(0, L]`. Monotone in lambda; flips at the principal eigenvalue.
    fn positive_on_grid(&self, lambda: f64, h: f64, n: usize) -> bool {
        let mut s = (0.0, 1.0);
        for i in 1..=n {
            s = self.propagate(lambda, (i - 1) as f64 * h, s, i as f64 * h);
            if s.0 <= 0.0 {
                return false;
            }
        }
        true
    }
}

/// Front-propagation regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Pulled,
    SemiPushed,
    FullyPushed,
}

/// The three equivalent semi-pushed tests, evaluated independently.
pub fn semi_pushed_tests(lambda_inf: f64) -> (bool, bool, bool) {
    let beta = (2.0 * lambda_inf).sqrt();
    let mu = (1.0 + 2.0 * lambda_inf).sqrt();
    let alpha = (mu + beta) / (mu - beta);
    (
        beta > 0.0 && alpha > 1.0 && alpha < 2.0,
        beta > 0.0 && mu > 3.0 * beta,
        lambda_inf > 0.0 && lambda_inf < 1.0 / 16.0,
    )
}

/// Classifies `lambda_inf`; the three semi-pushed tests must agree.
pub fn classify(lambda_inf: f64) -> Regime {
    if lambda_inf <= 0.0 {
        return Regime::Pulled;
    }
    let (a, b, c) = semi_pushed_tests(lambda_inf);
    debug_assert!(a == b && b == c, "regime tests disagree at lambda_inf = {lambda_inf}");
    if c {
        Regime::SemiPushed
    } else {
        Regime::FullyPushed
    }
}

/// Principal eigenpair on the half line for the same potential.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LimitSolution {
    pub potential: Potential,
    pub lambda_inf: f64,
    pub mu: f64,
    pub beta: f64,
    pub alpha: f64,
    /// `int_0^inf v_{1,inf}^2` with `v_{1,inf}(1) = 1`.
    pub v_sq_norm: f64,
    /// `(int_0^inf e^{-mu x} v_{1,inf})^{-1}`.
    pub c_inf: f64,
    /// Value of the unnormalized shooting solution at 1 (for rescaling).
    scale: f64,
    #[serde(skip, default = "default_ode")]
    ode: Option<Ode>,
}

fn default_ode() -> Option<Ode> {
    None
}

impl LimitSolution {
    /// Solves the half-line problem: `lambda_inf` is the largest `lambda > 0`
    /// with `v'(1) + sqrt(2 lambda) v(1) = 0`, or 0 when none exists.
    pub fn new(pot: &Potential) -> Result<Self> {
        pot.validate()?;
        let ode = Ode::new(pot, 1.0 / 4096.0);
        let n = 512;
        let h = 1.0 / n as f64;
        let accept = |lam: f64| -> bool {
            if !ode.positive_on_grid(lam, h, n) {
                return false;
            }
            let (v, dv) = ode.propagate(lam, 0.0, (0.0, 1.0), 1.0);
            dv + (2.0 * lam).sqrt() * v > 0.0
        };
        let lambda_inf = if accept(0.0) {
            0.0
        } else {
            let mut hi = 1.0 + pot.max_value();
            if !accept(hi) {
                return Err(Error::Bracket("half-line matching condition has no root".into()));
            }
            let mut lo = 0.0;
            loop {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if accept(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            hi
        };
        let beta = (2.0 * lambda_inf).sqrt();
        let mu = (1.0 + 2.0 * lambda_inf).sqrt();
        let alpha = (mu + beta) / (mu - beta);
        let scale = ode.propagate(lambda_inf, 0.0, (0.0, 1.0), 1.0).0;
        let mut out = Self {
            potential: pot.clone(),
            lambda_inf,
            mu,
            beta,
            alpha,
            v_sq_norm: f64::INFINITY,
            c_inf: 0.0,
            scale,
            ode: Some(ode),
        };
        if beta > 0.0 {
            let inner = quad::integrate_piecewise(0.0, 1.0, &pot.breakpoints(), 0.125, |x| out.v(x).powi(2));
            out.v_sq_norm = inner + 1.0 / (2.0 * beta);
            let inner_c = quad::integrate_piecewise(0.0, 1.0, &pot.breakpoints(), 0.125, |x| (-mu * x).exp() * out.v(x));
            out.c_inf = 1.0 / (inner_c + (-mu).exp() / (mu + beta));
        }
        Ok(out)
    }

    fn ode(&self) -> Ode {
        self.ode.clone().unwrap_or_else(|| Ode::new(&self.potential, 1.0 / 4096.0))
    }

    /// Half-line eigenfunction, `v(1) = 1`, `v(x) = e^{-beta (x - 1)}` for `x >= 1`.
    pub fn v(&self, x: f64) -> f64 {
        if x >= 1.0 {
            return (-self.beta * (x - 1.0)).exp();
        }
        let ode = match &self.ode {
            Some(o) => o.propagate(self.lambda_inf, 0.0, (0.0, 1.0), x),
            None => self.ode().propagate(self.lambda_inf, 0.0, (0.0, 1.0), x),
        };
        ode.0 / self.scale
    }

    pub fn regime(&self) -> Regime {
        classify(self.lambda_inf)
    }

    /// `||v_{1,inf}||_2` (not squared).
    pub fn v_norm(&self) -> f64 {
        self.v_sq_norm.sqrt()
    }
}

/// Principal eigenpair and derived quantities on `[0, L]`.
#[derive(Clone, Debug)]
pub struct SpectralSolution {
    pub potential: Potential,
    pub l: f64,
    pub tol: f64,
    pub lambda1: f64,
    /// Grid spacing; samples at `x_i = i h`, `i = 0..=n`.
    pub h: f64,
    pub v1: Vec<f64>,
    pub dv1: Vec<f64>,
    /// `||v_1||_2` (not squared).
    pub v1_norm2: f64,
    pub lambda1_inf: f64,
    pub w: f64,
    pub mu: f64,
    pub beta: f64,
    pub alpha: f64,
    pub c_l: f64,
    pub limit: LimitSolution,
    ode: Ode,
}

/// Number of grid intervals used for a domain of length `l`.
fn grid_size(l: f64) -> usize {
    let n = ((256.0 * l).ceil() as usize).max(4096);
    n + n % 2
}

/// Solves for the principal eigenpair by shooting on lambda.
///
/// The shot from `v(0) = 0, v'(0) = 1` is positive on all of `(0, L]` exactly
/// when `lambda > lambda_1` (Sturm oscillation), so bisection on that
/// predicate converges to the largest eigenvalue and never to a higher mode.
pub fn solve_slp(pot: &Potential, l: f64, tol: f64) -> Result<SpectralSolution> {
    pot.validate()?;
    if !(l > 1.0 && l.is_finite()) {
        return Err(Error::Invalid(format!("L must exceed 1, got {l}")));
    }
    if !(tol > 0.0) {
        return Err(Error::Invalid(format!("tol must be positive, got {tol}")));
    }
    let n = grid_size(l);
    let h = l / n as f64;
    if let Potential::Step { edge, .. } = pot {
        if *edge < 2.0 * h {
            return Err(Error::Resolution(format!("step edge {edge} is narrower than two grid cells (h = {h})")));
        }
    }
    if let Potential::Tabulated { xs, .. } = pot {
        let min_gap = xs.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        if min_gap < 1e-9 {
            return Err(Error::Resolution("tabulated nodes closer than 1e-9".into()));
        }
    }
    let ode = Ode::new(pot, h.min(1.0 / 4096.0));
    let mut hi = 1.0 + pot.max_value();
    let mut lo = (-1.0f64).min(-PI * PI / (l * l));
    if !ode.positive_on_grid(hi, h, n) {
        return Err(Error::Bracket(format!("shot not positive at the upper bracket {hi}")));
    }
    if ode.positive_on_grid(lo, h, n) {
        return Err(Error::Bracket(format!("shot already positive at the lower bracket {lo}")));
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if ode.positive_on_grid(mid, h, n) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let lambda1 = hi;
    let (mut v1, mut dv1) = ode.sample(lambda1, h, n, (0.0, 1.0));
    let at_one = ode.propagate(lambda1, 0.0, (0.0, 1.0), 1.0).0;
    for (v, d) in v1.iter_mut().zip(dv1.iter_mut()) {
        *v /= at_one;
        *d /= at_one;
    }
    let limit = LimitSolution::new(pot)?;
    let lambda1_inf = limit.lambda_inf;
    let beta = limit.beta;
    let mu = limit.mu;
    let alpha = limit.alpha;
    let mut sol = SpectralSolution {
        potential: pot.clone(),
        l,
        tol,
        lambda1,
        h,
        v1,
        dv1,
        v1_norm2: 0.0,
        lambda1_inf,
        w: lambda1_inf - lambda1,
        mu,
        beta,
        alpha,
        c_l: 0.0,
        limit,
        ode,
    };
    let sq = sol.integrate(|_, v, _| v * v);
    if !(sq.is_finite() && sq > 0.0) {
        return Err(Error::Quadrature("||v1||^2 is not finite and positive".into()));
    }
    sol.v1_norm2 = sq.sqrt();
    let c = sol.integrate(|x, v, _| (-mu * x).exp() * v);
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::Quadrature("int e^{-mu x} v1 is not finite and positive".into()));
    }
    sol.c_l = 1.0 / c;
    Ok(sol)
}

impl SpectralSolution {
    pub fn n(&self) -> usize {
        self.v1.len() - 1
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..=self.n()).map(|i| i as f64 * self.h).collect()
    }

    /// `(v_1(x), v_1'(x))` by exact local propagation from the nearest grid node.
    pub fn v1_at(&self, x: f64) -> (f64, f64) {
        let x = x.clamp(0.0, self.l);
        let i = ((x / self.h).floor() as usize).min(self.n());
        let xi = i as f64 * self.h;
        if x == xi {
            return (self.v1[i], self.dv1[i]);
        }
        self.ode.propagate(self.lambda1, xi, (self.v1[i], self.dv1[i]), x)
    }

    /// `||v_1||_2^2`.
    pub fn v1_sq_norm(&self) -> f64 {
        self.v1_norm2 * self.v1_norm2
    }

    /// `int_0^L f(x, v_1(x), v_1'(x)) dx` by piecewise Gauss-Legendre.
    pub fn integrate<F: FnMut(f64, f64, f64) -> f64>(&self, mut f: F) -> f64 {
        let mut breaks = self.potential.breakpoints();
        breaks.push(self.l);
        quad::integrate_piecewise(0.0, self.l, &breaks, 0.25, |x| {
            let (v, d) = self.v1_at(x);
            f(x, v, d)
        })
    }

    pub fn regime(&self) -> Regime {
        classify(self.lambda1_inf)
    }

    /// Harmonic function `h = e^{mu x} v_1 / (c_L ||v_1||^2)`.
    pub fn h_at(&self, x: f64) -> f64 {
        (self.mu * x).exp() * self.v1_at(x).0 / (self.c_l * self.v1_sq_norm())
    }

    /// `h~ = c_L e^{-mu x} v_1`, a probability density.
    pub fn h_tilde_at(&self, x: f64) -> f64 {
        self.c_l * (-self.mu * x).exp() * self.v1_at(x).0
    }

    /// Invariant density of the spine, `v_1^2 / ||v_1||^2`.
    pub fn pi_at(&self, x: f64) -> f64 {
        self.v1_at(x).0.powi(2) / self.v1_sq_norm()
    }

    /// Branching rate `r = W / 2 + 1 / 2`.
    pub fn rate_at(&self, x: f64) -> f64 {
        0.5 * self.potential.value(x) + 0.5
    }

    /// `sup |1/2 v'' + 1/2 W v - lambda_1 v|` on interior grid nodes, with `v''`
    /// from a fourth-order central difference of the derivative samples.
    pub fn ode_residual(&self) -> f64 {
        let mut breaks = self.potential.breakpoints();
        breaks.retain(|&b| b > 0.0 && b < self.l);
        let n = self.n();
        let h = self.h;
        let mut worst: f64 = 0.0;
        for i in 2..n - 1 {
            let (a, b) = ((i - 2) as f64 * h, (i + 2) as f64 * h);
            if breaks.iter().any(|&p| p > a && p < b) {
                continue;
            }
            let d = &self.dv1;
            let vpp = (d[i - 2] - 8.0 * d[i - 1] + 8.0 * d[i + 1] - d[i + 2]) / (12.0 * h);
            let x = i as f64 * h;
            let r = 0.5 * vpp + 0.5 * self.potential.value(x) * self.v1[i] - self.lambda1 * self.v1[i];
            worst = worst.max(r.abs());
        }
        worst
    }

    /// Number of sign changes of `v_1` on the grid interior.
    pub fn sign_changes(&self) -> usize {
        let n = self.n();
        self.v1[1..n].windows(2).filter(|w| w[0].signum() != w[1].signum()).count()
    }
}

/// `sup_{x in [1, L]} |v_1(x) - sinh(b (L - x)) / sinh(b (L - 1))|` with `b = sqrt(2 lambda_1)`.
pub fn verify_v1_tail(sol: &SpectralSolution) -> Result<f64> {
    if sol.lambda1 <= 0.0 {
        return Err(Error::Regime(format!("lambda_1 = {} <= 0: the sinh form does not apply", sol.lambda1)));
    }
    let b = (2.0 * sol.lambda1).sqrt();
    let denom = (b * (sol.l - 1.0)).sinh();
    let start = (1.0 / sol.h).ceil() as usize;
    let mut worst: f64 = 0.0;
    let mut check = |x: f64, v: f64| {
        let form = (b * (sol.l - x)).sinh() / denom;
        worst = worst.max((v - form).abs());
    };
    check(1.0, sol.v1_at(1.0).0);
    for i in start..=sol.n() {
        check(i as f64 * sol.h, sol.v1[i]);
    }
    Ok(worst)
}

/// Harmonic pair and invariant density sampled on the solution grid.
#[derive(Clone, Debug, Serialize)]
pub struct HarmonicPair {
    pub mu: f64,
    pub c_l: f64,
    pub x: Vec<f64>,
    pub h: Vec<f64>,
    pub h_tilde: Vec<f64>,
    pub pi: Vec<f64>,
}

pub fn harmonic_pair(sol: &SpectralSolution, mu: f64) -> Result<HarmonicPair> {
    if !(mu > 0.0) {
        return Err(Error::Invalid(format!("mu must be positive, got {mu}")));
    }
    let c = sol.integrate(|x, v, _| (-mu * x).exp() * v);
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::Quadrature("h~ is not normalizable".into()));
    }
    let c_l = 1.0 / c;
    let sq = sol.v1_sq_norm();
    let x = sol.grid();
    let h = x.iter().zip(&sol.v1).map(|(x, v)| (mu * x).exp() * v / (c_l * sq)).collect();
    let h_tilde = x.iter().zip(&sol.v1).map(|(x, v)| c_l * (-mu * x).exp() * v).collect();
    let pi = sol.v1.iter().map(|v| v * v / sq).collect();
    Ok(HarmonicPair { mu, c_l, x, h, h_tilde, pi })
}

/// Result of the spectral-gap regression.
#[derive(Clone, Debug, Serialize)]
pub struct GapScaling {
    pub ls: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub w: Vec<f64>,
    pub lambda_inf_estimate: f64,
    pub slope: f64,
    pub intercept: f64,
    pub beta: f64,
}

impl GapScaling {
    /// Relative deviation of the slope from `-2 beta`.
    pub fn relative_error(&self) -> f64 {
        (self.slope + 2.0 * self.beta).abs() / (2.0 * self.beta)
    }
}

/// Regresses `log w(L)` on `L`, with `lambda_{1,inf}` taken as `lambda_1(2 L_max)`.
pub fn gap_scaling(pot: &Potential, ls: &[f64]) -> Result<GapScaling> {
    if ls.len() < 4 || ls.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid("need at least 4 increasing lengths".into()));
    }
    let limit = LimitSolution::new(pot)?;
    if limit.beta <= 0.0 {
        return Err(Error::Regime("potential is not pushed (lambda_inf = 0)".into()));
    }
    let tol = 1e-12;
    let lmax = *ls.last().unwrap();
    let lam_inf = solve_slp(pot, 2.0 * lmax, tol)?.lambda1;
    let mut lambda1 = Vec::new();
    let mut w = Vec::new();
    for &l in ls {
        let s = solve_slp(pot, l, tol)?;
        let gap = lam_inf - s.lambda1;
        if !(gap > 0.0) {
            return Err(Error::Resolution(format!("gap at L = {l} is below rounding ({gap:e})")));
        }
        lambda1.push(s.lambda1);
        w.push(gap);
    }
    let logs: Vec<f64> = w.iter().map(|v| v.ln()).collect();
    let (intercept, slope) = linear_fit(ls, &logs);
    Ok(GapScaling { ls: ls.to_vec(), lambda1, w, lambda_inf_estimate: lam_inf, slope, intercept, beta: limit.beta })
}

/// Fundamental solutions of `1/2 u'' + 1/2 W u = lambda u`, `lambda = lambda_1 + xi`.
#[derive(Clone, Debug)]
pub struct FundamentalSolutions {
    pub lambda: f64,
    pub xi: f64,
    /// `1/2 (d g' - d' g)`, constant in x.
    pub wronskian: f64,
    pub g: Vec<f64>,
    pub dg: Vec<f64>,
    pub d: Vec<f64>,
    pub dd: Vec<f64>,
    h: f64,
    l: f64,
    ode: Ode,
}

impl FundamentalSolutions {
    fn eval(&self, y: &[f64], dy: &[f64], x: f64) -> (f64, f64) {
        let x = x.clamp(0.0, self.l);
        let n = y.len() - 1;
        let i = ((x / self.h).floor() as usize).min(n);
        let xi = i as f64 * self.h;
        if x == xi {
            return (y[i], dy[i]);
        }
        self.ode.propagate(self.lambda, xi, (y[i], dy[i]), x)
    }

    pub fn g_at(&self, x: f64) -> (f64, f64) {
        self.eval(&self.g, &self.dg, x)
    }

    pub fn d_at(&self, x: f64) -> (f64, f64) {
        self.eval(&self.d, &self.dd, x)
    }
}

/// `g` starts from `g(0) = 0, g'(0) = v_1'(0)`; `d` equals
/// `shyp(lambda, L - x) / shyp(lambda_1, L - 1)` beyond the support of W and is
/// continued below by integrating the ODE backwards.
pub fn fundamental_solutions(sol: &SpectralSolution, xi: f64) -> Result<FundamentalSolutions> {
    if !(xi > 0.0 && xi.is_finite()) {
        return Err(Error::Invalid(format!("xi must be positive, got {xi}")));
    }
    let lambda = sol.lambda1 + xi;
    let n = sol.n();
    let h = sol.h;
    let ode = sol.ode.clone();
    let (g, dg) = ode.sample(lambda, h, n, (0.0, sol.dv1[0]));
    let s1 = shyp(sol.lambda1, sol.l - 1.0);
    let mut d = vec![0.0; n + 1];
    let mut dd = vec![0.0; n + 1];
    let mut s = (0.0, -1.0 / s1);
    d[n] = s.0;
    dd[n] = s.1;
    for i in (0..n).rev() {
        s = ode.propagate(lambda, (i + 1) as f64 * h, s, i as f64 * h);
        d[i] = s.0;
        dd[i] = s.1;
    }
    let fs0 = FundamentalSolutions { lambda, xi, wronskian: 0.0, g, dg, d, dd, h, l: sol.l, ode };
    let (gv, gd) = fs0.g_at(1.0);
    let (dv, ddv) = fs0.d_at(1.0);
    let omega = 0.5 * (dv * gd - ddv * gv);
    let scale = 0.5 * ((dv * gd).abs() + (ddv * gv).abs());
    if !(omega.abs() > 1e-13 * scale) {
        return Err(Error::DegenerateWronskian { lambda });
    }
    Ok(FundamentalSolutions { wronskian: omega, ..fs0 })
}

/// Resolvent of the spine, `G_xi(x, y) = int_0^inf e^{-xi t} q_t(x, y) dt`.
#[derive(Clone, Debug)]
pub struct GreenFunction<'a> {
    pub sol: &'a SpectralSolution,
    pub fs: FundamentalSolutions,
}

impl<'a> GreenFunction<'a> {
    pub fn new(sol: &'a SpectralSolution, xi: f64) -> Result<Self> {
        Ok(Self { sol, fs: fundamental_solutions(sol, xi)? })
    }

    pub fn eval(&self, x: f64, y: f64) -> Result<f64> {
        let l = self.sol.l;
        if !(x > 0.0 && x < l) {
            return Err(Error::SingularArgument(format!("x = {x} must lie in (0, {l})")));
        }
        if !(0.0..=l).contains(&y) {
            return Err(Error::Domain(format!("y = {y} outside [0, {l}]")));
        }
        let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
        let g = self.fs.g_at(lo).0;
        let d = self.fs.d_at(hi).0;
        let ratio = self.sol.v1_at(y).0 / self.sol.v1_at(x).0;
        Ok(ratio * g * d / self.fs.wronskian)
    }
}

pub fn green_function(sol: &SpectralSolution, xi: f64, x: f64, y: f64) -> Result<f64> {
    GreenFunction::new(sol, xi)?.eval(x, y)
}

/// Cutoff geometry tying the domain length to the scale parameter `N`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CutoffGeometry {
    pub n: f64,
    pub a: f64,
    pub gamma: f64,
    pub l_na: f64,
    pub epsilon: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub mu: f64,
    pub beta: f64,
}

impl CutoffGeometry {
    pub fn new(limit: &LimitSolution, n: f64, a: f64, delta1: f64) -> Result<Self> {
        let (mu, beta) = (limit.mu, limit.beta);
        if limit.regime() != Regime::SemiPushed {
            return Err(Error::Regime(format!("alpha = {} is not in (1, 2)", limit.alpha)));
        }
        if !(n > 1.0) || !(a >= 1.0) {
            return Err(Error::Invalid(format!("need N > 1 and A >= 1, got N = {n}, A = {a}")));
        }
        if !(delta1 > 0.0 && delta1 < 1.0) {
            return Err(Error::Invalid(format!("delta1 must lie in (0, 1), got {delta1}")));
        }
        let l_na = n.ln() / (2.0 * beta) + a.ln() / (mu - beta);
        let epsilon = (1.0 - delta1) / beta * l_na;
        let delta2 = (1.0 - delta1) * (mu - beta) / (2.0 * beta) - 1.0;
        if !(delta2 > 0.0) {
            return Err(Error::Regime(format!("delta2 = {delta2} is not positive for delta1 = {delta1}")));
        }
        Ok(Self { n, a, gamma: 1.0 / (limit.alpha - 1.0), l_na, epsilon, delta1, delta2, mu, beta })
    }

    /// Inverse map: the `N` whose cutoff length equals `l` at cutoff `a`.
    pub fn n_for_length(limit: &LimitSolution, l: f64, a: f64) -> f64 {
        (2.0 * limit.beta * (l - a.ln() / (limit.mu - limit.beta))).exp()
    }

    /// `epsilon` through its second representation `2 (1 + delta2) L / (mu - beta)`.
    pub fn epsilon_alt(&self) -> f64 {
        2.0 * (1.0 + self.delta2) / (self.mu - self.beta) * self.l_na
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_potential_closed_form() {
        let sol = solve_slp(&Potential::Zero, 10.0, 1e-10).unwrap();
        assert!((sol.lambda1 + PI * PI / 200.0).abs() < 1e-12);
        let r = sol.v1_at(5.0).0 / sol.v1_at(2.5).0;
        assert!((r - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(sol.sign_changes(), 0);
        assert_eq!(sol.lambda1_inf, 0.0);
        assert_eq!(sol.regime(), Regime::Pulled);
    }

    #[test]
    fn transfer_continues_through_zero() {
        for &k2 in &[1e-3, -1e-3, 0.0] {
            let (c, sh) = transfer(k2, 2.0);
            assert!((c - 1.0).abs() < 3e-3 && (sh - 2.0).abs() < 3e-3);
        }
    }

    #[test]
    fn step_for_alpha_roundtrip() {
        for &a in &[1.3, 1.5, 1.8] {
            let pot = Potential::step_for_alpha(a, 1.0).unwrap();
            let lim = LimitSolution::new(&pot).unwrap();
            assert!((lim.alpha - a).abs() < 1e-9, "alpha {a}: got {}", lim.alpha);
            assert_eq!(lim.regime(), Regime::SemiPushed);
        }
    }

    #[test]
    fn tabulated_matches_step_when_flat() {
        let step = solve_slp(&Potential::step(3.0), 8.0, 1e-10).unwrap();
        let tab = Potential::Tabulated { xs: vec![0.0, 0.5, 1.0 - 1e-7], ws: vec![3.0, 3.0, 3.0] };
        let t = solve_slp(&tab, 8.0, 1e-10).unwrap();
        assert!((step.lambda1 - t.lambda1).abs() < 1e-6);
    }

    #[test]
    fn validation_errors() {
        assert!(Potential::Step { height: -1.0, edge: 1.0 }.validate().is_err());
        assert!(Potential::Step { height: 1.0, edge: 1.5 }.validate().is_err());
        assert!(Potential::Tabulated { xs: vec![0.0, 0.0], ws: vec![1.0, 1.0] }.validate().is_err());
        assert!(solve_slp(&Potential::Zero, 0.5, 1e-8).is_err());
        assert!(matches!(
            solve_slp(&Potential::Step { height: 1.0, edge: 1e-6 }, 10.0, 1e-8),
            Err(Error::Resolution(_))
        ));
    }

    #[test]
    fn regime_tests_agree_on_a_grid() {
        for i in 1..400 {
            let lam = (i as f64 + 0.5) * 5e-4;
            let (a, b, c) = semi_pushed_tests(lam);
            assert!(a == b && b == c, "lambda_inf = {lam}");
        }
    }
}
