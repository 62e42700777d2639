//! Operators on a sector Hilbert space in sparse, dense, or diagonal form.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, ShapeBuilder};

use crate::c64;
use crate::error::{Error, Result};

/// What an operator is known to be; checked by [`LinearOperator::verify`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OperatorKind {
    General,
    Hermitian,
    Projector,
}

/// Row-compressed complex sparse matrix.
#[derive(Clone, Debug)]
pub struct CsrMatrix {
    dim: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<c64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(dim: usize, mut triplets: Vec<(usize, usize, c64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; dim + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<c64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < dim && c < dim, "triplet ({r}, {c}) outside dimension {dim}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..dim {
            indptr[r + 1] += indptr[r];
        }
        Self { dim, indptr, indices, values }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates `(row, col, value)` in row-major order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, c64)> + '_ {
        (0..self.dim).flat_map(move |r| {
            (self.indptr[r]..self.indptr[r + 1]).map(move |k| (r, self.indices[k], self.values[k]))
        })
    }

    pub fn get(&self, row: usize, col: usize) -> c64 {
        let range = self.indptr[row]..self.indptr[row + 1];
        match self.indices[range.clone()].binary_search(&col) {
            Ok(pos) => self.values[range.start + pos],
            Err(_) => c64::new(0.0, 0.0),
        }
    }

    pub fn matvec_into(&self, x: &[c64], y: &mut [c64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(y.len(), self.dim);
        for (r, out) in y.iter_mut().enumerate() {
            let mut acc = c64::new(0.0, 0.0);
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += self.values[k] * x[self.indices[k]];
            }
            *out = acc;
        }
    }

    pub fn matvec(&self, x: ArrayView1<c64>) -> Array1<c64> {
        let x = x.to_vec();
        let mut y = vec![c64::new(0.0, 0.0); self.dim];
        self.matvec_into(&x, &mut y);
        Array1::from(y)
    }

    pub fn to_dense(&self) -> Array2<c64> {
        let mut out = Array2::zeros((self.dim, self.dim));
        for (r, c, v) in self.triplets() {
            out[[r, c]] += v;
        }
        out
    }

    pub fn is_real(&self) -> bool {
        self.values.iter().all(|v| v.im == 0.0)
    }
}

#[derive(Clone, Debug)]
pub enum Representation {
    Sparse(CsrMatrix),
    /// Column-major storage.
    Dense(Array2<c64>),
    Diagonal(Array1<c64>),
}

#[derive(Clone, Debug)]
pub struct LinearOperator {
    pub repr: Representation,
    pub kind: OperatorKind,
}

pub const HERMITIAN_TOL: f64 = 1e-12;
pub const PROJECTOR_TOL: f64 = 1e-10;

impl LinearOperator {
    pub fn sparse(m: CsrMatrix, kind: OperatorKind) -> Self {
        Self { repr: Representation::Sparse(m), kind }
    }

    /// Wraps a dense matrix, converting it to column-major layout.
    pub fn dense(m: Array2<c64>, kind: OperatorKind) -> Self {
        let m = if m.t().is_standard_layout() { m } else { to_column_major(m.view()) };
        Self { repr: Representation::Dense(m), kind }
    }

    pub fn diagonal(d: Array1<c64>, kind: OperatorKind) -> Self {
        Self { repr: Representation::Diagonal(d), kind }
    }

    pub fn real_diagonal(d: &[f64]) -> Self {
        Self::diagonal(d.iter().map(|&x| c64::new(x, 0.0)).collect(), OperatorKind::Hermitian)
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(Array1::from_elem(dim, c64::new(1.0, 0.0)), OperatorKind::Projector)
    }

    pub fn dim(&self) -> usize {
        match &self.repr {
            Representation::Sparse(m) => m.dim(),
            Representation::Dense(m) => m.nrows(),
            Representation::Diagonal(d) => d.len(),
        }
    }

    pub fn as_sparse(&self) -> Option<&CsrMatrix> {
        match &self.repr {
            Representation::Sparse(m) => Some(m),
            _ => None,
        }
    }

    pub fn diagonal_entries(&self) -> Option<&Array1<c64>> {
        match &self.repr {
            Representation::Diagonal(d) => Some(d),
            _ => None,
        }
    }

    pub fn apply(&self, x: ArrayView1<c64>) -> Array1<c64> {
        match &self.repr {
            Representation::Sparse(m) => m.matvec(x),
            Representation::Dense(m) => m.dot(&x),
            Representation::Diagonal(d) => d * &x,
        }
    }

    /// Applies the operator to every column of `block`.
    pub fn apply_block(&self, block: ArrayView2<c64>) -> Array2<c64> {
        match &self.repr {
            Representation::Dense(m) => m.dot(&block),
            Representation::Diagonal(d) => {
                let mut out = block.to_owned();
                for (mut row, &v) in out.axis_iter_mut(Axis(0)).zip(d.iter()) {
                    row.mapv_inplace(|x| x * v);
                }
                out
            }
            Representation::Sparse(m) => {
                let mut out = Array2::zeros(block.raw_dim());
                for (r, c, v) in m.triplets() {
                    let src = block.row(c);
                    out.row_mut(r).scaled_add(v, &src);
                }
                out
            }
        }
    }

    pub fn to_dense(&self) -> Array2<c64> {
        match &self.repr {
            Representation::Sparse(m) => m.to_dense(),
            Representation::Dense(m) => m.clone(),
            Representation::Diagonal(d) => Array2::from_diag(d),
        }
    }

    /// `max |A - A^H|` over all entries.
    pub fn hermiticity_error(&self) -> f64 {
        match &self.repr {
            Representation::Diagonal(d) => d.iter().map(|v| v.im.abs() * 2.0).fold(0.0, f64::max),
            Representation::Sparse(m) => m
                .triplets()
                .map(|(r, c, v)| (v - m.get(c, r).conj()).norm())
                .fold(0.0, f64::max),
            Representation::Dense(m) => max_abs_diff(m.view(), m.t().mapv(|v| v.conj()).view()),
        }
    }

    /// `max |A^2 - A|` over all entries.
    pub fn idempotency_error(&self) -> f64 {
        match &self.repr {
            Representation::Diagonal(d) => {
                d.iter().map(|&v| (v * v - v).norm()).fold(0.0, f64::max)
            }
            _ => {
                let a = self.to_dense();
                max_abs_diff(a.dot(&a).view(), a.view())
            }
        }
    }

    /// `max |AB - BA|` over all entries (dense arithmetic).
    pub fn commutator_error(&self, other: &LinearOperator) -> f64 {
        if let (Some(m), Some(d)) = (self.as_sparse(), other.diagonal_entries()) {
            return m
                .triplets()
                .map(|(r, c, v)| (v * (d[c] - d[r])).norm())
                .fold(0.0, f64::max);
        }
        let a = self.to_dense();
        let b = other.to_dense();
        max_abs_diff(a.dot(&b).view(), b.dot(&a).view())
    }

    /// Checks the invariant implied by `kind`.
    pub fn verify(&self) -> Result<()> {
        match self.kind {
            OperatorKind::General => Ok(()),
            OperatorKind::Hermitian => {
                let err = self.hermiticity_error();
                if err < HERMITIAN_TOL {
                    Ok(())
                } else {
                    Err(Error::NotHermitian(err))
                }
            }
            OperatorKind::Projector => {
                let err = self.idempotency_error();
                if err < PROJECTOR_TOL {
                    Ok(())
                } else {
                    Err(Error::InvalidInput(format!("operator is not idempotent (error {err:e})")))
                }
            }
        }
    }

    /// Writes `row col re im` lines (0-based indices) for every stored entry.
    pub fn write_triplets<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        match &self.repr {
            Representation::Sparse(m) => {
                for (r, c, v) in m.triplets() {
                    writeln!(w, "{r} {c} {} {}", v.re, v.im)?;
                }
            }
            Representation::Diagonal(d) => {
                for (i, v) in d.iter().enumerate() {
                    if v.norm() != 0.0 {
                        writeln!(w, "{i} {i} {} {}", v.re, v.im)?;
                    }
                }
            }
            Representation::Dense(m) => {
                for ((r, c), v) in m.indexed_iter() {
                    if v.norm() != 0.0 {
                        writeln!(w, "{r} {c} {} {}", v.re, v.im)?;
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn max_abs_diff(a: ArrayView2<c64>, b: ArrayView2<c64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

pub fn to_column_major(m: ArrayView2<c64>) -> Array2<c64> {
    let mut out = Array2::zeros(m.raw_dim().f());
    out.assign(&m);
    out
}

/// Parses the `row col re im` format written by [`LinearOperator::write_triplets`].
pub fn read_triplets(text: &str, dim: usize) -> Result<CsrMatrix> {
    let mut trip = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::InvalidInput(format!("malformed triplet on line {}", lineno + 1));
        if fields.len() != 4 {
            return Err(bad());
        }
        let r: usize = fields[0].parse().map_err(|_| bad())?;
        let c: usize = fields[1].parse().map_err(|_| bad())?;
        let re: f64 = fields[2].parse().map_err(|_| bad())?;
        let im: f64 = fields[3].parse().map_err(|_| bad())?;
        if r >= dim || c >= dim {
            return Err(bad());
        }
        trip.push((r, c, c64::new(re, im)));
    }
    Ok(CsrMatrix::from_triplets(dim, trip))
}
