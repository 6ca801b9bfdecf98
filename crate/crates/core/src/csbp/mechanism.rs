use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finite measure `Lambda_0` with all moments, used as the base of the cutoff family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MomentedMeasure {
    /// Lebesgue measure on `[0, 1]`.
    LebesgueOn01,
    /// Atoms at `xs` with masses `ws`.
    Atoms { xs: Vec<f64>, ws: Vec<f64> },
}

impl MomentedMeasure {
    /// `int x^p Lambda_0(dx)`.
    pub fn moment(&self, p: u32) -> f64 {
        match self {
            MomentedMeasure::LebesgueOn01 => 1.0 / (p as f64 + 1.0),
            MomentedMeasure::Atoms { xs, ws } => xs.iter().zip(ws).map(|(x, w)| w * x.powi(p as i32)).sum(),
        }
    }
}

/// Jump part of a branching mechanism.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum JumpMeasure {
    None,
    /// Pure stable jumps with `psi(theta) = c theta^alpha`.
    AlphaStable { c: f64, alpha: f64 },
    /// Image of `A^{-alpha} Lambda_0` under `x -> A x`, so that `m_p = A^{p - alpha} m_p(Lambda_0)`.
    CutoffStable { a: f64, alpha: f64, base: MomentedMeasure },
    /// Atoms `(x_i, w_i)`.
    Tabulated { xs: Vec<f64>, ws: Vec<f64> },
}

/// Concrete form of a jump measure after unfolding the cutoff rescaling.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum JumpLaw {
    None,
    Stable { c: f64, alpha: f64 },
    /// Constant density `density` on `[0, len]`.
    Uniform { len: f64, density: f64 },
    Atoms { xs: Vec<f64>, ws: Vec<f64> },
}

/// `psi(theta) = b theta + (d/2) theta^2 + int (e^{-theta x} - 1 + theta x) Lambda(dx)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchingMechanism {
    pub b: f64,
    pub d: f64,
    pub jump: JumpMeasure,
}

impl BranchingMechanism {
    pub fn new(b: f64, d: f64, jump: JumpMeasure) -> Result<Self> {
        let m = Self { b, d, jump };
        m.validate()?;
        Ok(m)
    }

    /// Feller diffusion `psi(theta) = (d/2) theta^2`.
    pub fn feller(d: f64) -> Self {
        Self { b: 0.0, d, jump: JumpMeasure::None }
    }

    pub fn alpha_stable(c: f64, alpha: f64) -> Result<Self> {
        Self::new(0.0, 0.0, JumpMeasure::AlphaStable { c, alpha })
    }

    /// Cutoff stable family with Lebesgue base on `[0, 1]`.
    pub fn cutoff_lebesgue(a: f64, alpha: f64) -> Result<Self> {
        Self::new(0.0, 0.0, JumpMeasure::CutoffStable { a, alpha, base: MomentedMeasure::LebesgueOn01 })
    }

    pub fn linear(b: f64) -> Self {
        Self { b, d: 0.0, jump: JumpMeasure::None }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.b.is_finite() {
            return Err(Error::Invalid("b must be finite".into()));
        }
        if !(self.d >= 0.0) || !self.d.is_finite() {
            return Err(Error::Invalid(format!("d must be finite and >= 0, got {}", self.d)));
        }
        match &self.jump {
            JumpMeasure::None => {}
            JumpMeasure::AlphaStable { c, alpha } => {
                if !(*c > 0.0) || !(*alpha > 1.0 && *alpha < 2.0) {
                    return Err(Error::Invalid(format!("stable jumps need c > 0 and alpha in (1,2), got c={c}, alpha={alpha}")));
                }
            }
            JumpMeasure::CutoffStable { a, alpha, base } => {
                if !(*a >= 1.0) || !(*alpha > 1.0 && *alpha < 2.0) {
                    return Err(Error::Invalid(format!("cutoff family needs A >= 1 and alpha in (1,2), got A={a}, alpha={alpha}")));
                }
                if let MomentedMeasure::Atoms { xs, ws } = base {
                    check_atoms(xs, ws)?;
                }
            }
            JumpMeasure::Tabulated { xs, ws } => check_atoms(xs, ws)?,
        }
        Ok(())
    }

    pub(crate) fn law(&self) -> JumpLaw {
        match &self.jump {
            JumpMeasure::None => JumpLaw::None,
            JumpMeasure::AlphaStable { c, alpha } => JumpLaw::Stable { c: *c, alpha: *alpha },
            JumpMeasure::CutoffStable { a, alpha, base } => match base {
                MomentedMeasure::LebesgueOn01 => JumpLaw::Uniform { len: *a, density: a.powf(-1.0 - alpha) },
                MomentedMeasure::Atoms { xs, ws } => JumpLaw::Atoms {
                    xs: xs.iter().map(|x| a * x).collect(),
                    ws: ws.iter().map(|w| w * a.powf(-alpha)).collect(),
                },
            },
            JumpMeasure::Tabulated { xs, ws } => JumpLaw::Atoms { xs: xs.clone(), ws: ws.clone() },
        }
    }

    /// Evaluates `psi(theta)`; negative `theta` is a domain error.
    pub fn psi(&self, theta: f64) -> Result<f64> {
        if !(theta >= 0.0) {
            return Err(Error::Domain(format!("psi needs theta >= 0, got {theta}")));
        }
        Ok(self.psi_unchecked(theta))
    }

    pub(crate) fn psi_unchecked(&self, theta: f64) -> f64 {
        self.b * theta + 0.5 * self.d * theta * theta + jump_psi(&self.jump, theta)
    }

    /// `psi'(theta)`.
    pub fn psi_prime(&self, theta: f64) -> f64 {
        self.b + self.d * theta + jump_psi_prime(&self.jump, theta)
    }

    /// `m_p = 1{p = 2} d + int x^p Lambda(dx)`; infinite for stable jumps.
    pub fn jump_moment(&self, p: u32) -> f64 {
        let diff = if p == 2 { self.d } else { 0.0 };
        let jm = match &self.jump {
            JumpMeasure::None => 0.0,
            JumpMeasure::AlphaStable { .. } => f64::INFINITY,
            JumpMeasure::CutoffStable { a, alpha, base } => a.powf(p as f64 - alpha) * base.moment(p),
            JumpMeasure::Tabulated { xs, ws } => xs.iter().zip(ws).map(|(x, w)| w * x.powi(p as i32)).sum(),
        };
        diff + jm
    }

    /// True when every jump moment is finite.
    pub fn has_all_moments(&self) -> bool {
        !matches!(self.jump, JumpMeasure::AlphaStable { .. })
    }
}

fn check_atoms(xs: &[f64], ws: &[f64]) -> Result<()> {
    if xs.len() != ws.len() {
        return Err(Error::Shape(format!("{} atom positions but {} masses", xs.len(), ws.len())));
    }
    if xs.iter().any(|&x| !(x > 0.0) || !x.is_finite()) || ws.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::Invalid("atoms need positive positions and non-negative masses".into()));
    }
    Ok(())
}

/// `(1 - e^{-y})/y - 1 + y/2 = sum_{n>=2} (-1)^n y^n / (n+1)!`.
fn phi_uniform(y: f64) -> f64 {
    if y < 0.1 {
        let mut term = y * y / 6.0;
        let mut s = 0.0;
        for n in 2..14 {
            s += term;
            term *= -y / (n as f64 + 2.0);
        }
        s
    } else {
        -(-y).exp_m1() / y - 1.0 + 0.5 * y
    }
}

/// `int_0^1 z (1 - e^{-y z}) dz = 1/2 - (1 - e^{-y}(1 + y))/y^2`.
fn phi_uniform_prime(y: f64) -> f64 {
    if y < 0.1 {
        // sum_{n>=1} (-1)^{n+1} y^n / (n! (n+2))
        let mut fact = 1.0;
        let mut pw = 1.0;
        let mut s = 0.0;
        for n in 1..14 {
            fact *= n as f64;
            pw *= y;
            let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
            s += sign * pw / (fact * (n as f64 + 2.0));
        }
        s
    } else {
        0.5 - g_split(y) / (y * y)
    }
}

/// `1 - e^{-y}(1 + y)`, the probability that a Poisson(y) variable is at least 2.
pub(crate) fn g_split(y: f64) -> f64 {
    if y < 0.1 {
        // sum_{n>=2} (-1)^n (n-1) y^n / n!
        let mut fact = 1.0;
        let mut pw = y;
        let mut s = 0.0;
        for n in 2..16 {
            fact *= n as f64;
            pw *= y;
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            s += sign * (n as f64 - 1.0) * pw / fact;
        }
        s
    } else {
        -(-y).exp_m1() - y * (-y).exp()
    }
}

/// `int_0^1 g_split(y z) dz`.
pub(crate) fn g_split_mean(y: f64) -> f64 {
    if y < 0.1 {
        let mut fact = 1.0;
        let mut pw = y;
        let mut s = 0.0;
        for n in 2..16 {
            fact *= n as f64;
            pw *= y;
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            s += sign * (n as f64 - 1.0) * pw / (fact * (n as f64 + 1.0));
        }
        s
    } else {
        1.0 - (2.0 - (-y).exp() * (2.0 + y)) / y
    }
}

fn atoms_psi(xs: &[f64], ws: &[f64], sx: f64, sw: f64, theta: f64) -> f64 {
    xs.iter()
        .zip(ws)
        .map(|(x, w)| {
            let y = theta * sx * x;
            // e^{-y} - 1 + y, with the series near zero.
            let v = if y < 1e-3 { y * y * (0.5 - y / 6.0 + y * y / 24.0) } else { (-y).exp_m1() + y };
            sw * w * v
        })
        .sum()
}

fn atoms_psi_prime(xs: &[f64], ws: &[f64], sx: f64, sw: f64, theta: f64) -> f64 {
    xs.iter().zip(ws).map(|(x, w)| -sw * w * sx * x * (-theta * sx * x).exp_m1()).sum()
}

fn jump_psi(jump: &JumpMeasure, theta: f64) -> f64 {
    match jump {
        JumpMeasure::None => 0.0,
        JumpMeasure::AlphaStable { c, alpha } => c * theta.powf(*alpha),
        JumpMeasure::CutoffStable { a, alpha, base } => match base {
            MomentedMeasure::LebesgueOn01 => a.powf(-alpha) * phi_uniform(theta * a),
            MomentedMeasure::Atoms { xs, ws } => atoms_psi(xs, ws, *a, a.powf(-alpha), theta),
        },
        JumpMeasure::Tabulated { xs, ws } => atoms_psi(xs, ws, 1.0, 1.0, theta),
    }
}

fn jump_psi_prime(jump: &JumpMeasure, theta: f64) -> f64 {
    match jump {
        JumpMeasure::None => 0.0,
        JumpMeasure::AlphaStable { c, alpha } => c * alpha * theta.powf(alpha - 1.0),
        JumpMeasure::CutoffStable { a, alpha, base } => match base {
            MomentedMeasure::LebesgueOn01 => a.powf(1.0 - alpha) * phi_uniform_prime(theta * a),
            MomentedMeasure::Atoms { xs, ws } => atoms_psi_prime(xs, ws, *a, a.powf(-alpha), theta),
        },
        JumpMeasure::Tabulated { xs, ws } => atoms_psi_prime(xs, ws, 1.0, 1.0, theta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::integrate_piecewise;

    #[test]
    fn psi_examples() {
        let st = BranchingMechanism::alpha_stable(1.0, 1.5).unwrap();
        assert!((st.psi(4.0).unwrap() - 8.0).abs() < 1e-12);
        assert!((BranchingMechanism::linear(2.0).psi(3.0).unwrap() - 6.0).abs() < 1e-15);
        assert!(matches!(st.psi(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn cutoff_psi_matches_quadrature() {
        let m = BranchingMechanism::cutoff_lebesgue(2.0, 1.5).unwrap();
        for &theta in &[1e-3, 0.05, 1.0, 7.0] {
            let dens = 2f64.powf(-2.5);
            let q = integrate_piecewise(0.0, 2.0, &[], 0.05, |x| dens * ((-theta * x).exp() - 1.0 + theta * x));
            let got = m.psi(theta).unwrap();
            assert!((got - q).abs() < 1e-10 * q, "theta={theta}: {got} vs {q}");
            let qp = integrate_piecewise(0.0, 2.0, &[], 0.05, |x| dens * x * (1.0 - (-theta * x).exp()));
            assert!((m.psi_prime(theta) - qp).abs() < 1e-12 * qp);
        }
    }

    #[test]
    fn split_helpers_are_continuous_at_switch() {
        for f in [g_split, g_split_mean, phi_uniform, phi_uniform_prime] {
            let a = f(0.1 - 1e-12);
            let b = f(0.1 + 1e-12);
            assert!((a - b).abs() < 1e-10 * a.abs());
        }
    }

    #[test]
    fn cutoff_moment_scaling() {
        for &alpha in &[1.2, 1.5, 1.8] {
            let base = MomentedMeasure::Atoms { xs: vec![0.3, 0.9], ws: vec![1.0, 2.0] };
            let one = BranchingMechanism::new(0.0, 0.0, JumpMeasure::CutoffStable { a: 1.0, alpha, base: base.clone() }).unwrap();
            let four = BranchingMechanism::new(0.0, 0.0, JumpMeasure::CutoffStable { a: 4.0, alpha, base }).unwrap();
            for p in 2..8 {
                let r = four.jump_moment(p) / one.jump_moment(p);
                assert!((r - 4f64.powf(p as f64 - alpha)).abs() < 1e-12 * r);
            }
            // The unfolded atoms reproduce the same moments.
            if let JumpLaw::Atoms { xs, ws } = four.law() {
                let m3: f64 = xs.iter().zip(&ws).map(|(x, w)| w * x.powi(3)).sum();
                assert!((m3 - four.jump_moment(3)).abs() < 1e-12 * m3);
            } else {
                panic!("expected atoms");
            }
        }
    }
}
