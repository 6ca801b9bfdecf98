use crate::error::{Error, Result};
use crate::quad::{brent, gl16};

use super::mechanism::BranchingMechanism;

const S_MIN: f64 = -300.0;
/// `ln(1e150)`, low enough that `theta^2` stays finite.
const S_MAX: f64 = 345.387_763_949_106_8;
const PANEL: f64 = 0.125;

/// Laplace-exponent flow `d/dt u_t(theta) = -psi(u_t(theta))`, `u_0(theta) = theta`.
///
/// The flow is solved by inverting `t = int_{u}^{theta} dv / psi(v)` in the
/// log variable `s = ln v`, where the integrand `e^s / psi(e^s)` is smooth
/// and slowly varying for every mechanism handled here. Panel integrals are
/// tabulated once; suffix sums of positive panels locate the root and a
/// final Brent solve on one panel gives full precision.
#[derive(Clone, Debug)]
pub struct LaplaceFlow {
    pub mech: BranchingMechanism,
    /// `suffix[j] = int_{s_j}^{S_MAX} e^s / psi(e^s) ds`.
    suffix: Vec<f64>,
    /// Local decay rate of the integrand below `S_MIN`.
    kappa_lo: f64,
    /// Integral beyond `S_MAX` under a local power law, if it converges.
    tail: Option<f64>,
    grey: std::result::Result<(), String>,
}

impl LaplaceFlow {
    pub fn new(mech: &BranchingMechanism) -> Result<Self> {
        mech.validate()?;
        if mech.b < 0.0 {
            return Err(Error::Domain(format!("supercritical mechanisms (b = {} < 0) are not supported by the flow", mech.b)));
        }
        if !(mech.psi_unchecked(1.0) > 0.0) {
            return Err(Error::Invalid("psi vanishes identically".into()));
        }
        let n = ((S_MAX - S_MIN) / PANEL).round() as usize;
        let h = (S_MAX - S_MIN) / n as f64;
        let g = |s: f64| integrand(mech, s);
        let rule = gl16();
        let mut suffix = vec![0.0; n + 1];
        for j in (0..n).rev() {
            let a = S_MIN + j as f64 * h;
            suffix[j] = suffix[j + 1] + rule.integrate(a, a + h, g);
        }
        let kappa_lo = (g(S_MIN) / g(S_MIN + h)).ln() / h;
        let kappa_hi = (g(S_MAX - h) / g(S_MAX)).ln() / h;
        let tail = if kappa_hi > 1e-3 { Some(g(S_MAX) / kappa_hi) } else { None };
        let top_decade = rule.integrate(S_MAX - std::f64::consts::LN_10, S_MAX, g);
        let grey = match tail {
            None => Err(format!("int dv/psi diverges (log-slope of psi at 1e150 is {:.4})", 1.0 + kappa_hi)),
            Some(tl) => {
                let total = suffix[((0.0 - S_MIN) / h).round() as usize] + tl;
                if top_decade < 1e-3 * total {
                    Ok(())
                } else {
                    Err(format!("int dv/psi converges too slowly: last decade carries {:.3e} of {:.3e}", top_decade, total))
                }
            }
        };
        Ok(Self {
            mech: mech.clone(),
            suffix,
            kappa_lo,
            tail,
            grey,
        })
    }

    fn h(&self) -> f64 {
        (S_MAX - S_MIN) / (self.suffix.len() - 1) as f64
    }

    fn g(&self, s: f64) -> f64 {
        integrand(&self.mech, s)
    }

    /// `S(s) = int_s^{S_MAX} e^x / psi(e^x) dx`.
    fn big_s(&self, s: f64) -> f64 {
        let h = self.h();
        let n = self.suffix.len() - 1;
        if s < S_MIN {
            let g0 = self.g(S_MIN);
            let x = S_MIN - s;
            let ext = if self.kappa_lo.abs() < 1e-9 { g0 * x } else { g0 * (self.kappa_lo * x).exp_m1() / self.kappa_lo };
            return self.suffix[0] + ext;
        }
        let j = (((s - S_MIN) / h).floor() as usize).min(n - 1);
        let hi = S_MIN + (j + 1) as f64 * h;
        self.suffix[j + 1] + gl16().integrate(s, hi, |x| self.g(x))
    }

    /// Solves `S(s) = target` for `s`.
    fn big_s_inv(&self, target: f64) -> f64 {
        let h = self.h();
        let n = self.suffix.len() - 1;
        if target <= 0.0 {
            return S_MAX;
        }
        if target > self.suffix[0] {
            let g0 = self.g(S_MIN);
            let extra = target - self.suffix[0];
            let x = if self.kappa_lo.abs() < 1e-9 { extra / g0 } else { (1.0 + self.kappa_lo * extra / g0).ln() / self.kappa_lo };
            return S_MIN - x;
        }
        // suffix is decreasing: find j with suffix[j + 1] <= target <= suffix[j].
        let (mut lo, mut hi) = (0usize, n);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.suffix[mid] >= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let a = S_MIN + lo as f64 * h;
        let b = a + h;
        let base = self.suffix[lo + 1];
        brent(|s| base + gl16().integrate(s, b, |x| self.g(x)) - target, a, b, 1e-15, 200).unwrap_or(a)
    }

    /// `u_t(theta)`.
    pub fn laplace_exponent(&self, theta: f64, t: f64) -> Result<f64> {
        if !(theta >= 0.0) || !(t >= 0.0) {
            return Err(Error::Domain(format!("laplace_exponent needs theta, t >= 0 (got {theta}, {t})")));
        }
        if theta == 0.0 {
            return Ok(0.0);
        }
        if t == 0.0 {
            return Ok(theta);
        }
        let s = theta.ln();
        if s > S_MAX {
            return Err(Error::Domain(format!("theta = {theta:e} exceeds the supported range")));
        }
        Ok(self.big_s_inv(self.big_s(s) + t).exp())
    }

    /// Grey's condition: `psi(1) > 0` and `int^infty dv / psi(v) < infty` numerically.
    pub fn grey_check(&self) -> Result<()> {
        self.grey.clone().map_err(Error::NoExtinction)
    }

    /// `ubar_t = lim_{theta -> infty} u_t(theta)` by driving `theta` through
    /// `1e2, 1e3, ...` until successive values agree to relative `1e-9`.
    pub fn grey_ubar(&self, t: f64) -> Result<f64> {
        self.grey_check()?;
        if !(t > 0.0) {
            return Err(Error::Domain(format!("ubar needs t > 0, got {t}")));
        }
        let mut theta = 1e2;
        let mut prev = self.laplace_exponent(theta, t)?;
        while theta < 1e149 {
            theta *= 10.0;
            let next = self.laplace_exponent(theta, t)?;
            if (prev - next).abs() < 1e-9 * prev {
                return Ok(next);
            }
            prev = next;
        }
        Err(Error::NoExtinction(format!("u_t(theta) did not settle by theta = 1e150 at t = {t}")))
    }

    /// `ubar_t` from the tail integral `t = int_{ubar}^infty dv / psi(v)` directly.
    pub fn ubar(&self, t: f64) -> Result<f64> {
        self.grey_check()?;
        if !(t > 0.0) {
            return Err(Error::Domain(format!("ubar needs t > 0, got {t}")));
        }
        let tail = self.tail.unwrap_or(0.0);
        if t <= tail {
            return Err(Error::Domain(format!("t = {t:e} is too small: ubar exceeds 1e150")));
        }
        Ok(self.big_s_inv(t - tail).exp())
    }

    /// `Phi(theta) = int_theta^infty dv / psi(v)`, so that `ubar_{Phi(theta)} = theta`.
    pub fn tail_integral(&self, theta: f64) -> Result<f64> {
        self.grey_check()?;
        Ok(self.big_s(theta.ln()) + self.tail.unwrap_or(0.0))
    }
}

fn integrand(mech: &BranchingMechanism, s: f64) -> f64 {
    let v = s.exp();
    v / mech.psi_unchecked(v)
}
