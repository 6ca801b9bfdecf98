//! Streaming sample statistics and comparison helpers.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

/// Mergeable running mean and variance (Welford / Chan).
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct Accumulator {
    pub n: u64,
    pub mean: f64,
    m2: f64,
}

impl Accumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Accumulator) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        self.mean += d * other.n as f64 / n as f64;
        self.m2 += other.m2 + d * d * self.n as f64 * other.n as f64 / n as f64;
        self.n = n;
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return f64::NAN;
        }
        self.m2 / (self.n - 1) as f64
    }

    /// Standard error of the mean.
    pub fn stderr(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut a = Self::new();
        for &x in xs {
            a.push(x);
        }
        a
    }
}

/// z-score of `lhs +- lhs_se` against `rhs +- rhs_se`.
pub fn z_score(lhs: f64, lhs_se: f64, rhs: f64, rhs_se: f64) -> f64 {
    let se = (lhs_se * lhs_se + rhs_se * rhs_se).sqrt();
    if se == 0.0 {
        if lhs == rhs {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (lhs - rhs) / se
    }
}

/// Two-sided normal quantile for a Bonferroni-corrected family of `m` tests at
/// per-family level matching `z_nominal` for a single test.
pub fn bonferroni_threshold(z_nominal: f64, m: usize) -> f64 {
    if m <= 1 {
        return z_nominal;
    }
    let p = 2.0 * normal_sf(z_nominal) / m as f64;
    normal_isf(p / 2.0)
}

/// Upper tail of the standard normal.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Inverse of `normal_sf`.
pub fn normal_isf(p: f64) -> f64 {
    -Normal::standard().inverse_cdf(p)
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(|p, q| p.partial_cmp(q).unwrap());
    y.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let lam = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    (d, kolmogorov_sf(lam))
}

fn kolmogorov_sf(lam: f64) -> f64 {
    if lam < 1e-3 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..200 {
        let kf = k as f64;
        let term = 2.0 * (if k % 2 == 1 { 1.0 } else { -1.0 }) * (-2.0 * kf * kf * lam * lam).exp();
        s += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    s.clamp(0.0, 1.0)
}
