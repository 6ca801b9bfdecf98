//! Planar ultrametric matrices: validation, depth, level-`s` decomposition,
//! reconstruction and the permutation action.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Dense square matrix (row-major). Used for permuted, possibly non-planar,
/// distance matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    k: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(k: usize) -> Self {
        Self { k, data: vec![0.0; k * k] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape(format!("expected a square {k}x{k} matrix")));
        }
        Ok(Self { k, data: rows.iter().flatten().copied().collect() })
    }

    pub fn from_flat(k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != k * k {
            return Err(Error::Shape(format!("{} entries cannot form a {k}x{k} matrix", data.len())));
        }
        Ok(Self { k, data })
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.k + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.k + j] = v;
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.k.max(1)).map(|r| r.to_vec()).take(self.k).collect()
    }

    /// Largest entry (0 for the empty and 1x1 matrices).
    pub fn tau(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// Sub-matrix on the index set `idx` (in the given order).
    pub fn restrict(&self, idx: &[usize]) -> Matrix {
        let m = idx.len();
        let mut out = Matrix::zeros(m);
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                out.set(a, b, self.get(i, j));
            }
        }
        out
    }

    /// Partition of `[k]` under the closure of `i ~ j iff U_ij < s`, blocks
    /// ranked by least element, each block listed in increasing order.
    pub fn blocks_at(&self, s: f64) -> Vec<Vec<usize>> {
        let k = self.k;
        let mut parent: Vec<usize> = (0..k).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for i in 0..k {
            for j in i + 1..k {
                if self.get(i, j) < s {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                        parent[hi] = lo;
                    }
                }
            }
        }
        let mut root_block: Vec<Option<usize>> = vec![None; k];
        let mut blocks: Vec<Vec<usize>> = Vec::new();
        for i in 0..k {
            let r = find(&mut parent, i);
            match root_block[r] {
                Some(b) => blocks[b].push(i),
                None => {
                    root_block[r] = Some(blocks.len());
                    blocks.push(vec![i]);
                }
            }
        }
        blocks
    }

    /// Composition, sub-matrices and blocks at level `s`.
    pub fn decompose_at(&self, s: f64) -> Decomposition {
        let blocks = self.blocks_at(s);
        let composition = Composition(blocks.iter().map(|b| b.len()).collect());
        let subs = blocks.iter().map(|b| self.restrict(b)).collect();
        Decomposition { composition, subs, blocks }
    }

    /// `P U P^T`: entry `(i, j)` is `U_{P(i), P(j)}`.
    pub fn permute(&self, p: &[usize]) -> Result<Matrix> {
        check_permutation(p, self.k)?;
        Ok(self.restrict(p))
    }

    /// Checks symmetry, non-negativity and a zero diagonal.
    pub fn check_symmetric(&self) -> Result<()> {
        for i in 0..self.k {
            if self.get(i, i) != 0.0 {
                return Err(Error::NonzeroDiagonal { i });
            }
            for j in 0..self.k {
                let v = self.get(i, j);
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::NegativeEntry { i, j });
                }
                if v != self.get(j, i) {
                    return Err(Error::Asymmetric { i, j });
                }
            }
        }
        Ok(())
    }

    /// Ultrametric inequality `U_ij <= max(U_il, U_lj)` for all triples.
    pub fn is_ultrametric(&self) -> bool {
        let k = self.k;
        for i in 0..k {
            for j in 0..k {
                for l in 0..k {
                    if self.get(i, j) > self.get(i, l).max(self.get(l, j)) {
                        return false;
                    }
                }
            }
        }
        true
    }
}

fn check_permutation(p: &[usize], k: usize) -> Result<()> {
    if p.len() != k {
        return Err(Error::Shape(format!("permutation of length {} for k = {k}", p.len())));
    }
    let mut seen = vec![false; k];
    for &i in p {
        if i >= k || seen[i] {
            return Err(Error::Invalid(format!("{p:?} is not a permutation of 0..{k}")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Ordered sequence of positive parts.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Composition(pub Vec<usize>);

impl Composition {
    pub fn parts(&self) -> &[usize] {
        &self.0
    }

    /// Number of parts `|c|`.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    /// All compositions of `k`, in lexicographic order.
    pub fn all(k: usize) -> Vec<Composition> {
        fn rec(rest: usize, cur: &mut Vec<usize>, out: &mut Vec<Composition>) {
            if rest == 0 {
                out.push(Composition(cur.clone()));
                return;
            }
            for p in 1..=rest {
                cur.push(p);
                rec(rest - p, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        if k > 0 {
            rec(k, &mut Vec::new(), &mut out);
        }
        out
    }
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: Vec<String> = self.0.iter().map(|p| p.to_string()).collect();
        write!(f, "({})", s.join(","))
    }
}

/// Output of `decompose_at`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub composition: Composition,
    pub subs: Vec<Matrix>,
    pub blocks: Vec<Vec<usize>>,
}

/// Validated planar ultrametric matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarUltrametricMatrix(Matrix);

impl PlanarUltrametricMatrix {
    /// Validates symmetry, the zero diagonal and every planar triple `i < l < j`.
    pub fn validate(m: Matrix) -> Result<Self> {
        m.check_symmetric()?;
        let k = m.k();
        for i in 0..k {
            for j in i + 2..k {
                for l in i + 1..j {
                    if m.get(i, j) != m.get(i, l).max(m.get(l, j)) {
                        return Err(Error::PlanarViolation { i, l, j });
                    }
                }
            }
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::validate(Matrix::from_rows(rows)?)
    }

    /// `U_ij = max(H_i, ..., H_{j-1})` for `i < j`.
    pub fn from_depths(h: &[f64]) -> Result<Self> {
        if h.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Invalid("depths must be finite and non-negative".into()));
        }
        let k = h.len() + 1;
        let mut m = Matrix::zeros(k);
        for i in 0..k {
            let mut run = 0.0f64;
            for j in i + 1..k {
                run = run.max(h[j - 1]);
                m.set(i, j, run);
                m.set(j, i, run);
            }
        }
        Self::validate(m)
    }

    /// The consecutive maxima `H_i = U_{i, i+1}` encoding the matrix.
    pub fn depths(&self) -> Vec<f64> {
        (0..self.k().saturating_sub(1)).map(|i| self.get(i, i + 1)).collect()
    }

    /// Concatenates sub-matrices at depth `tau`: entries across blocks are `tau`.
    pub fn reconstruct(tau: f64, c: &Composition, subs: &[PlanarUltrametricMatrix]) -> Result<Self> {
        if c.len() != subs.len() {
            return Err(Error::Shape(format!("composition {c} has {} parts but {} sub-matrices", c.len(), subs.len())));
        }
        if !(tau >= 0.0) {
            return Err(Error::Invalid(format!("tau must be >= 0, got {tau}")));
        }
        for (p, s) in c.parts().iter().zip(subs) {
            if *p != s.k() {
                return Err(Error::Shape(format!("part {p} does not match a {}x{} sub-matrix", s.k(), s.k())));
            }
            if s.k() >= 2 && !(s.tau() < tau) {
                return Err(Error::Nesting { depth: s.tau(), tau });
            }
        }
        if c.len() == 1 {
            return Ok(subs[0].clone());
        }
        let k = c.total();
        let mut m = Matrix::zeros(k);
        let mut offsets = Vec::with_capacity(subs.len());
        let mut o = 0;
        for s in subs {
            offsets.push(o);
            o += s.k();
        }
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    m.set(i, j, tau);
                }
            }
        }
        for (s, &o) in subs.iter().zip(&offsets) {
            for a in 0..s.k() {
                for b in 0..s.k() {
                    m.set(o + a, o + b, s.get(a, b));
                }
            }
        }
        Self::validate(m)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn k(&self) -> usize {
        self.0.k()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn tau(&self) -> f64 {
        self.0.tau()
    }

    /// Level-`s` decomposition; the blocks of a planar matrix are intervals.
    pub fn decompose_at(&self, s: f64) -> (Composition, Vec<PlanarUltrametricMatrix>, Vec<Vec<usize>>) {
        let d = self.0.decompose_at(s);
        let subs = d.subs.into_iter().map(PlanarUltrametricMatrix).collect();
        (d.composition, subs, d.blocks)
    }

    pub fn permute(&self, p: &[usize]) -> Result<Matrix> {
        self.0.permute(p)
    }
}

/// Free-function form of `PlanarUltrametricMatrix::validate`.
pub fn validate(m: Matrix) -> Result<PlanarUltrametricMatrix> {
    PlanarUltrametricMatrix::validate(m)
}

/// Free-function form of `tau`.
pub fn tau(u: &PlanarUltrametricMatrix) -> f64 {
    u.tau()
}

/// Marks attached to the leaves of a matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkedMatrix {
    pub matrix: Matrix,
    pub marks: Vec<f64>,
}

impl MarkedMatrix {
    pub fn new(matrix: Matrix, marks: Vec<f64>) -> Result<Self> {
        if marks.len() != matrix.k() {
            return Err(Error::Shape(format!("{} marks for k = {}", marks.len(), matrix.k())));
        }
        Ok(Self { matrix, marks })
    }

    /// Unit marks.
    pub fn unmarked(matrix: Matrix) -> Self {
        let k = matrix.k();
        Self { matrix, marks: vec![1.0; k] }
    }

    pub fn k(&self) -> usize {
        self.matrix.k()
    }

    pub fn restrict(&self, idx: &[usize]) -> MarkedMatrix {
        MarkedMatrix { matrix: self.matrix.restrict(idx), marks: idx.iter().map(|&i| self.marks[i]).collect() }
    }

    pub fn permute(&self, p: &[usize]) -> Result<MarkedMatrix> {
        check_permutation(p, self.k())?;
        Ok(self.restrict(p))
    }
}

/// CSV rows: header `k,u_0_0,u_0_1,...` followed by one row per matrix.
pub fn matrices_to_csv(ms: &[Matrix]) -> Result<String> {
    let k = ms.first().map(|m| m.k()).unwrap_or(0);
    if ms.iter().any(|m| m.k() != k) {
        return Err(Error::Shape("all matrices in one CSV must share k".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["k".to_string()];
    for i in 0..k {
        for j in 0..k {
            header.push(format!("u_{i}_{j}"));
        }
    }
    w.write_record(&header).map_err(csv_err)?;
    for m in ms {
        let mut rec = vec![k.to_string()];
        rec.extend(m.as_flat().iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn matrices_from_csv(text: &str) -> Result<Vec<Matrix>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let k: usize = rec.get(0).ok_or_else(|| Error::Config("empty row".into()))?.trim().parse().map_err(|_| Error::Config("bad k".into()))?;
        let vals: std::result::Result<Vec<f64>, _> = rec.iter().skip(1).map(|s| s.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|e| Error::Config(e.to_string()))?;
        out.push(Matrix::from_flat(k, vals)?);
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}
