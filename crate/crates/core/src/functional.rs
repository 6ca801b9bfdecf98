//! Product functionals on marked planar ultrametric matrices, with an
//! optional gap `epsilon` that merges branch points in `[tau - epsilon, tau]`.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ultrametric::{Composition, MarkedMatrix};

/// Real function of one variable: a depth function `f(tau)` or a mark function.
#[derive(Clone)]
pub enum ScalarFn {
    Constant(f64),
    /// `sum_i c_i x^i`.
    Polynomial(Vec<f64>),
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl ScalarFn {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            ScalarFn::Constant(c) => *c,
            ScalarFn::Polynomial(cs) => cs.iter().rev().fold(0.0, |acc, c| acc * x + c),
            ScalarFn::Custom(f) => f(x),
        }
    }

    pub fn custom<F: Fn(f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        ScalarFn::Custom(Arc::new(f))
    }

    pub fn constant_value(&self) -> Option<f64> {
        match self {
            ScalarFn::Constant(c) => Some(*c),
            ScalarFn::Polynomial(cs) if cs.len() <= 1 => Some(cs.first().copied().unwrap_or(0.0)),
            _ => None,
        }
    }
}

impl fmt::Debug for ScalarFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarFn::Constant(c) => write!(f, "Constant({c})"),
            ScalarFn::Polynomial(cs) => write!(f, "Polynomial({cs:?})"),
            ScalarFn::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// Recursive evaluator tree.
#[derive(Clone, Debug)]
pub enum Functional {
    /// `G = value` on `k`-leaf matrices.
    Constant { k: usize, value: f64 },
    /// One leaf: `G = f(mark)`.
    Leaf(ScalarFn),
    Product(Box<ProductFunctional>),
}

/// `G(U) = 1{c^{tau - eps}(U) = c} f(tau(U)) prod_i F_i(U_i^{tau - eps})`.
#[derive(Clone, Debug)]
pub struct ProductFunctional {
    pub composition: Composition,
    pub depth: ScalarFn,
    pub children: Vec<Functional>,
    pub epsilon: f64,
}

impl ProductFunctional {
    pub fn new(composition: Composition, depth: ScalarFn, children: Vec<Functional>, epsilon: f64) -> Result<Self> {
        if composition.is_empty() || composition.parts().contains(&0) {
            return Err(Error::Invalid(format!("composition {composition} must have positive parts")));
        }
        if composition.len() != children.len() {
            return Err(Error::Shape(format!(
                "composition {composition} has {} parts but {} children",
                composition.len(),
                children.len()
            )));
        }
        for (p, ch) in composition.parts().iter().zip(&children) {
            if ch.k() != *p {
                return Err(Error::Shape(format!("child for part {p} accepts {} leaves", ch.k())));
            }
        }
        if !(epsilon >= 0.0) {
            return Err(Error::Invalid(format!("epsilon must be >= 0, got {epsilon}")));
        }
        Ok(Self { composition, depth, children, epsilon })
    }

    pub fn k(&self) -> usize {
        self.composition.total()
    }
}

impl Functional {
    pub fn one(k: usize) -> Self {
        Functional::Constant { k, value: 1.0 }
    }

    pub fn product(c: Composition, depth: ScalarFn, children: Vec<Functional>, epsilon: f64) -> Result<Self> {
        Ok(Functional::Product(Box::new(ProductFunctional::new(c, depth, children, epsilon)?)))
    }

    /// `1{c^{tau - eps}(U) = c}`.
    pub fn indicator(c: Composition, epsilon: f64) -> Result<Self> {
        let children = c.parts().iter().map(|&p| Functional::one(p)).collect();
        Self::product(c, ScalarFn::Constant(1.0), children, epsilon)
    }

    /// `1{c^{tau - eps}(U) = c} p(tau(U))` for a polynomial `p`.
    pub fn depth_polynomial(c: Composition, coeffs: Vec<f64>, epsilon: f64) -> Result<Self> {
        let children = c.parts().iter().map(|&p| Functional::one(p)).collect();
        Self::product(c, ScalarFn::Polynomial(coeffs), children, epsilon)
    }

    /// Number of leaves the functional accepts.
    pub fn k(&self) -> usize {
        match self {
            Functional::Constant { k, .. } => *k,
            Functional::Leaf(_) => 1,
            Functional::Product(p) => p.k(),
        }
    }

    pub fn max_epsilon(&self) -> f64 {
        match self {
            Functional::Product(p) => p.children.iter().map(|c| c.max_epsilon()).fold(p.epsilon, f64::max),
            _ => 0.0,
        }
    }

    pub fn eval(&self, m: &MarkedMatrix) -> f64 {
        match self {
            Functional::Constant { k, value } => {
                if m.k() == *k {
                    *value
                } else {
                    0.0
                }
            }
            Functional::Leaf(f) => {
                if m.k() == 1 {
                    f.eval(m.marks[0])
                } else {
                    0.0
                }
            }
            Functional::Product(p) => {
                if m.k() != p.k() {
                    return 0.0;
                }
                let tau = m.matrix.tau();
                let level = if p.epsilon > 0.0 { tau - p.epsilon } else { tau };
                let blocks = m.matrix.blocks_at(level);
                if blocks.len() != p.composition.len() || blocks.iter().zip(p.composition.parts()).any(|(b, c)| b.len() != *c) {
                    return 0.0;
                }
                let mut acc = p.depth.eval(tau);
                for (b, ch) in blocks.iter().zip(&p.children) {
                    if acc == 0.0 {
                        break;
                    }
                    acc *= ch.eval(&m.restrict(b));
                }
                acc
            }
        }
    }
}

/// Serializable description of a functional from the named library.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum FunctionalSpec {
    Constant {
        k: usize,
        #[serde(default = "one")]
        value: f64,
    },
    Indicator {
        composition: Vec<usize>,
        #[serde(default)]
        epsilon: f64,
    },
    DepthPolynomial {
        composition: Vec<usize>,
        coeffs: Vec<f64>,
        #[serde(default)]
        epsilon: f64,
    },
    Product {
        composition: Vec<usize>,
        #[serde(default = "unit_poly")]
        depth: Vec<f64>,
        children: Vec<FunctionalSpec>,
        #[serde(default)]
        epsilon: f64,
    },
    /// Polynomial of the single mark.
    Leaf { coeffs: Vec<f64> },
}

fn one() -> f64 {
    1.0
}

fn unit_poly() -> Vec<f64> {
    vec![1.0]
}

impl FunctionalSpec {
    pub fn build(&self) -> Result<Functional> {
        match self {
            FunctionalSpec::Constant { k, value } => {
                if *k == 0 {
                    return Err(Error::Invalid("constant functional needs k >= 1".into()));
                }
                Ok(Functional::Constant { k: *k, value: *value })
            }
            FunctionalSpec::Indicator { composition, epsilon } => Functional::indicator(Composition(composition.clone()), *epsilon),
            FunctionalSpec::DepthPolynomial { composition, coeffs, epsilon } => {
                Functional::depth_polynomial(Composition(composition.clone()), coeffs.clone(), *epsilon)
            }
            FunctionalSpec::Product { composition, depth, children, epsilon } => {
                let ch = children.iter().map(|c| c.build()).collect::<Result<Vec<_>>>()?;
                Functional::product(Composition(composition.clone()), ScalarFn::Polynomial(depth.clone()), ch, *epsilon)
            }
            FunctionalSpec::Leaf { coeffs } => Ok(Functional::Leaf(ScalarFn::Polynomial(coeffs.clone()))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ultrametric::{Matrix, PlanarUltrametricMatrix};

    fn mm(h: &[f64]) -> MarkedMatrix {
        MarkedMatrix::unmarked(PlanarUltrametricMatrix::from_depths(h).unwrap().into_matrix())
    }

    #[test]
    fn indicator_examples() {
        let g = Functional::indicator(Composition(vec![1, 1]), 0.0).unwrap();
        assert_eq!(g.eval(&mm(&[3.0])), 1.0);
        let g2 = Functional::indicator(Composition(vec![2]), 0.0).unwrap();
        assert_eq!(g2.eval(&mm(&[3.0])), 0.0);
    }

    #[test]
    fn sketch_functional_multiplies_subtrees() {
        let h = [10.0, 3.0, 9.5, 2.0, 4.0, 9.8, 1.0, 9.2];
        let m = mm(&h);
        let children2: Vec<Functional> = [1usize, 2, 3, 2, 1]
            .iter()
            .map(|&p| Functional::Constant { k: p, value: 2.0 })
            .collect();
        let g2 = Functional::product(Composition(vec![1, 2, 3, 2, 1]), ScalarFn::Polynomial(vec![0.0, 1.0]), children2, 1.0).unwrap();
        // f(tau) = tau = 10 times five children worth 2 each.
        assert_eq!(g2.eval(&m), 10.0 * 32.0);
        let g0 = Functional::product(
            Composition(vec![1, 2, 3, 2, 1]),
            ScalarFn::Constant(1.0),
            [1usize, 2, 3, 2, 1].iter().map(|&p| Functional::one(p)).collect(),
            0.0,
        )
        .unwrap();
        assert_eq!(g0.eval(&m), 0.0);
    }

    #[test]
    fn leaf_marks_are_restricted_to_blocks() {
        let u = PlanarUltrametricMatrix::from_depths(&[1.0, 2.0]).unwrap().into_matrix();
        let m = MarkedMatrix::new(u, vec![0.5, 2.0, 3.0]).unwrap();
        let lin = Functional::Leaf(ScalarFn::Polynomial(vec![0.0, 1.0]));
        let inner = Functional::product(Composition(vec![1, 1]), ScalarFn::Constant(1.0), vec![lin.clone(), lin.clone()], 0.0).unwrap();
        let g = Functional::product(Composition(vec![2, 1]), ScalarFn::Constant(1.0), vec![inner, lin], 0.0).unwrap();
        assert_eq!(g.eval(&m), 0.5 * 2.0 * 3.0);
    }

    #[test]
    fn json_library_roundtrip() {
        let text = r#"{"type":"depth-polynomial","composition":[1,1],"coeffs":[0,2]}"#;
        let spec = FunctionalSpec::from_json(text).unwrap();
        let g = spec.build().unwrap();
        assert_eq!(g.eval(&mm(&[3.0])), 6.0);
        let c = FunctionalSpec::from_json(r#"{"type":"constant","k":3}"#).unwrap().build().unwrap();
        assert_eq!(c.eval(&MarkedMatrix::unmarked(Matrix::zeros(3))), 1.0);
        assert!(FunctionalSpec::from_json(r#"{"type":"indicator","composition":[2,1,0]}"#).unwrap().build().is_err());
    }

    #[test]
    fn shape_errors() {
        assert!(Functional::product(Composition(vec![2, 1]), ScalarFn::Constant(1.0), vec![Functional::one(1), Functional::one(1)], 0.0).is_err());
        assert!(Functional::product(Composition(vec![1, 1]), ScalarFn::Constant(1.0), vec![Functional::one(1)], 0.0).is_err());
    }
}
