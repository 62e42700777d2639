//! Eigendecompositions, unitary propagators and the energy-window projector.

mod krylov;

use std::io::Write;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use ndarray_linalg::{Eigh, UPLO};

pub use krylov::{krylov_step, krylov_step_with, KrylovOptions, KrylovOutcome, KrylovPropagator};

use crate::c64;
use crate::error::{Error, Result};
use crate::operator::{LinearOperator, OperatorKind, Representation};
use crate::spin_model::{
    hamiltonian_from_bonds, local_ladder_bonds, words_with_popcount, ModelParams, SectorBasis,
};

pub const DEFAULT_DENSE_THRESHOLD: usize = 13_000;
pub const DENSE_THRESHOLD_ENV: &str = "SPINHIST_DENSE_THRESHOLD";

/// Eigenvalues closer than this are treated as degenerate when ordering levels
/// and when testing window membership.
pub const LEVEL_TOL: f64 = 1e-12;

/// Largest dimension handled by dense diagonalization; overridable through
/// the `SPINHIST_DENSE_THRESHOLD` environment variable.
pub fn dense_threshold() -> usize {
    parse_threshold(std::env::var(DENSE_THRESHOLD_ENV).ok().as_deref())
}

fn parse_threshold(value: Option<&str>) -> usize {
    value.and_then(|v| v.trim().parse().ok()).unwrap_or(DEFAULT_DENSE_THRESHOLD)
}

/// Complete eigensystem of a Hermitian operator, eigenvalues ascending.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    /// Eigenvectors as columns.
    pub eigenvectors: Array2<c64>,
    /// `X` eigenvalue of each eigenvector when the spectrum was computed in
    /// joint `X` blocks.
    pub x_labels: Option<Vec<i32>>,
}

impl Spectrum {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `max |V^H V - 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let v = &self.eigenvectors;
        let gram = v.t().mapv(|z| z.conj()).dot(v);
        gram.indexed_iter()
            .map(|((i, j), z)| (z - if i == j { c64::new(1.0, 0.0) } else { c64::new(0.0, 0.0) }).norm())
            .fold(0.0, f64::max)
    }

    /// Relative Frobenius error of `V diag(lambda) V^H` against `op`.
    pub fn reconstruction_error(&self, op: &LinearOperator) -> f64 {
        let a = op.to_dense();
        let mut scaled = self.eigenvectors.clone();
        for (mut col, &lam) in scaled.axis_iter_mut(Axis(1)).zip(&self.eigenvalues) {
            col.mapv_inplace(|z| z * lam);
        }
        let rebuilt = scaled.dot(&self.eigenvectors.t().mapv(|z| z.conj()));
        let diff: f64 = (&rebuilt - &a).iter().map(|z| z.norm_sqr()).sum();
        let norm: f64 = a.iter().map(|z| z.norm_sqr()).sum();
        (diff / norm.max(f64::MIN_POSITIVE)).sqrt()
    }

    /// `index,eigenvalue,x_label` rows; the label column is empty when unknown.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "index,eigenvalue,x_label")?;
        for (i, e) in self.eigenvalues.iter().enumerate() {
            match &self.x_labels {
                Some(x) => writeln!(w, "{i},{e},{}", x[i])?,
                None => writeln!(w, "{i},{e},")?,
            }
        }
        Ok(())
    }
}

fn hermitian_dense(op: &LinearOperator) -> Result<Array2<c64>> {
    let err = op.hermiticity_error();
    if err >= crate::operator::HERMITIAN_TOL {
        return Err(Error::NotHermitian(err));
    }
    Ok(op.to_dense())
}

/// Dense eigensolver for Hermitian matrices; real input takes the real path.
fn eigh_dense(a: Array2<c64>) -> Result<(Vec<f64>, Array2<c64>)> {
    if a.iter().all(|z| z.im == 0.0) {
        let re = a.mapv(|z| z.re);
        let (w, v) = re.eigh(UPLO::Lower)?;
        Ok((w.to_vec(), v.mapv(|x| c64::new(x, 0.0))))
    } else {
        let (w, v) = a.eigh(UPLO::Lower)?;
        Ok((w.to_vec(), v))
    }
}

/// Full eigendecomposition of a Hermitian operator.
pub fn diagonalize(h: &LinearOperator) -> Result<Spectrum> {
    diagonalize_with_threshold(h, dense_threshold())
}

pub fn diagonalize_with_threshold(h: &LinearOperator, threshold: usize) -> Result<Spectrum> {
    if h.dim() > threshold {
        return Err(Error::DenseThresholdExceeded { dim: h.dim(), threshold });
    }
    let (eigenvalues, eigenvectors) = eigh_dense(hermitian_dense(h)?)?;
    Ok(Spectrum { eigenvalues, eigenvectors, x_labels: None })
}

/// Eigenvectors of the uncoupled Hamiltonian inside one `X` eigenspace.
#[derive(Clone, Debug)]
pub struct XBlock {
    pub x: i32,
    /// Sector indices spanned by the block.
    pub rows: Vec<usize>,
    pub eigenvalues: Vec<f64>,
    /// `rows.len() x rows.len()`, columns are eigenvectors.
    pub eigenvectors: Array2<c64>,
}

/// One eigenpair of a [`BlockSpectrum`], addressed by block and column.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Level {
    pub energy: f64,
    pub x: i32,
    pub block: usize,
    pub column: usize,
}

/// Eigensystem of an operator that commutes with the diagonal `X`, computed
/// block by block so that every eigenvector is an exact `X` eigenvector.
#[derive(Clone, Debug)]
pub struct BlockSpectrum {
    pub dim: usize,
    pub blocks: Vec<XBlock>,
}

impl BlockSpectrum {
    /// Levels sorted by energy; degenerate levels (within [`LEVEL_TOL`]) are
    /// ordered by descending `X`, then by block-internal order.
    pub fn levels(&self) -> Vec<Level> {
        let mut levels: Vec<Level> = self
            .blocks
            .iter()
            .enumerate()
            .flat_map(|(b, blk)| {
                blk.eigenvalues
                    .iter()
                    .enumerate()
                    .map(move |(c, &e)| Level { energy: e, x: blk.x, block: b, column: c })
            })
            .collect();
        levels.sort_by(|a, b| a.energy.total_cmp(&b.energy));
        let mut start = 0;
        while start < levels.len() {
            let mut end = start + 1;
            while end < levels.len() && levels[end].energy - levels[end - 1].energy <= LEVEL_TOL {
                end += 1;
            }
            levels[start..end].sort_by(|a, b| {
                b.x.cmp(&a.x).then(a.block.cmp(&b.block)).then(a.column.cmp(&b.column))
            });
            start = end;
        }
        levels
    }

    /// Embeds a block eigenvector into the full sector.
    pub fn vector(&self, level: &Level) -> Array1<c64> {
        let blk = &self.blocks[level.block];
        let mut v = Array1::zeros(self.dim);
        for (k, &r) in blk.rows.iter().enumerate() {
            v[r] = blk.eigenvectors[[k, level.column]];
        }
        v
    }

    /// Dense spectrum with `X` labels, in [`Self::levels`] order.
    pub fn to_dense(&self) -> Spectrum {
        let levels = self.levels();
        let mut vecs = Array2::zeros((self.dim, self.dim));
        for (i, level) in levels.iter().enumerate() {
            vecs.column_mut(i).assign(&self.vector(level));
        }
        Spectrum {
            eigenvalues: levels.iter().map(|l| l.energy).collect(),
            eigenvectors: vecs,
            x_labels: Some(levels.iter().map(|l| l.x).collect()),
        }
    }
}

fn x_values(x: &LinearOperator) -> Result<Vec<i32>> {
    let d = x
        .diagonal_entries()
        .ok_or_else(|| Error::InvalidInput("X must be a diagonal operator".into()))?;
    d.iter()
        .map(|z| {
            let r = z.re.round();
            if (z.re - r).abs() > 1e-9 || z.im != 0.0 {
                Err(Error::InvalidInput(format!("X eigenvalue {z} is not an integer")))
            } else {
                Ok(r as i32)
            }
        })
        .collect()
}

/// Diagonalizes `h0` separately inside every eigenspace of the diagonal `x`.
///
/// Fails if `h0` couples different `X` eigenspaces.
pub fn diagonalize_in_x_blocks(h0: &LinearOperator, x: &LinearOperator) -> Result<BlockSpectrum> {
    let xs = x_values(x)?;
    if xs.len() != h0.dim() {
        return Err(Error::DimensionMismatch { expected: h0.dim(), got: xs.len() });
    }
    let leak = h0.commutator_error(x);
    if leak > 1e-12 {
        return Err(Error::InvalidInput(format!("H0 does not commute with X (error {leak:e})")));
    }
    let mut distinct = xs.clone();
    distinct.sort_unstable_by(|a, b| b.cmp(a));
    distinct.dedup();
    let dense = match &h0.repr {
        Representation::Sparse(_) => None,
        _ => Some(h0.to_dense()),
    };
    let mut blocks = Vec::with_capacity(distinct.len());
    for &xv in &distinct {
        let rows: Vec<usize> = (0..xs.len()).filter(|&i| xs[i] == xv).collect();
        let mut sub = Array2::zeros((rows.len(), rows.len()));
        for (a, &ra) in rows.iter().enumerate() {
            for (b, &rb) in rows.iter().enumerate() {
                sub[[a, b]] = match (&dense, h0.as_sparse()) {
                    (Some(m), _) => m[[ra, rb]],
                    (None, Some(m)) => m.get(ra, rb),
                    _ => unreachable!(),
                };
            }
        }
        let threshold = dense_threshold();
        if rows.len() > threshold {
            return Err(Error::DenseThresholdExceeded { dim: rows.len(), threshold });
        }
        let (eigenvalues, eigenvectors) = eigh_dense(sub)?;
        blocks.push(XBlock { x: xv, rows, eigenvalues, eigenvectors });
    }
    Ok(BlockSpectrum { dim: h0.dim(), blocks })
}

/// Eigensystem of the uncoupled Hamiltonian `h_L + h_R` from the spectra of a
/// single ladder in each of its magnetization sectors.
///
/// Every eigenvector is a product of one left and one right ladder eigenstate,
/// hence an exact eigenvector of `X` and of the total magnetization.
pub fn diagonalize_uncoupled(params: &ModelParams, basis: &SectorBasis) -> Result<BlockSpectrum> {
    params.validate()?;
    if basis.num_spins != params.num_spins() {
        return Err(Error::BasisMismatch { basis: basis.num_spins, expected: params.num_spins() });
    }
    let n = params.n;
    let half = 2 * n;
    let local = local_ladder_bonds(params)?;
    let num_up = basis.num_up();

    // spectrum of one ladder per up-count
    let mut ladder: Vec<Option<(Vec<u32>, Vec<f64>, Array2<f64>)>> = vec![None; half + 1];
    let mut local_spectrum = |up: usize| -> Result<(Vec<u32>, Vec<f64>, Array2<f64>)> {
        if let Some(found) = &ladder[up] {
            return Ok(found.clone());
        }
        let words = words_with_popcount(half, up);
        let sz = up as f64 - n as f64;
        let lb = crate::spin_model::build_basis(half, sz)?;
        debug_assert_eq!(lb.states(), &words[..]);
        let h = hamiltonian_from_bonds(&lb, &local, params.delta);
        let (w, v) = h.to_dense().mapv(|z| z.re).eigh(UPLO::Lower)?;
        let entry = (words, w.to_vec(), v);
        ladder[up] = Some(entry.clone());
        Ok(entry)
    };

    let mut blocks = Vec::new();
    for up_left in (0..=half.min(num_up)).rev() {
        let Some(up_right) = num_up.checked_sub(up_left) else { continue };
        if up_right > half {
            continue;
        }
        let (lw, le, lv) = local_spectrum(up_left)?;
        let (rw, re, rv) = local_spectrum(up_right)?;
        // rows sorted by sector index
        let mut rows: Vec<(usize, usize, usize)> = Vec::with_capacity(lw.len() * rw.len());
        for (i, &l) in lw.iter().enumerate() {
            for (k, &r) in rw.iter().enumerate() {
                let word = l | (r << half);
                let idx = basis.index_of(word).expect("product word lies in the sector");
                rows.push((idx, i, k));
            }
        }
        rows.sort_unstable();
        let ncols = le.len() * re.len();
        let mut eigenvalues = Vec::with_capacity(ncols);
        for a in 0..le.len() {
            for b in 0..re.len() {
                eigenvalues.push(le[a] + re[b]);
            }
        }
        let mut vecs = Array2::<c64>::zeros((rows.len(), ncols));
        for (row, &(_, i, k)) in rows.iter().enumerate() {
            for a in 0..le.len() {
                let la = lv[[i, a]];
                for b in 0..re.len() {
                    vecs[[row, a * re.len() + b]] = c64::new(la * rv[[k, b]], 0.0);
                }
            }
        }
        // ascending energy inside the block
        let mut order: Vec<usize> = (0..ncols).collect();
        order.sort_by(|&p, &q| eigenvalues[p].total_cmp(&eigenvalues[q]));
        let eigenvalues: Vec<f64> = order.iter().map(|&p| eigenvalues[p]).collect();
        let vecs = vecs.select(Axis(1), &order);
        blocks.push(XBlock {
            x: up_left as i32 - up_right as i32,
            rows: rows.iter().map(|r| r.0).collect(),
            eigenvalues,
            eigenvectors: vecs,
        });
    }
    Ok(BlockSpectrum { dim: basis.dim(), blocks })
}

fn in_window(e: f64, window: (f64, f64)) -> bool {
    e >= window.0 - LEVEL_TOL && e <= window.1 + LEVEL_TOL
}

/// Counts levels below, inside and above a closed window.
pub fn window_counts(eigenvalues: impl Iterator<Item = f64>, window: (f64, f64)) -> (usize, usize, usize) {
    let mut counts = (0, 0, 0);
    for e in eigenvalues {
        if e < window.0 - LEVEL_TOL {
            counts.0 += 1;
        } else if e > window.1 + LEVEL_TOL {
            counts.2 += 1;
        } else {
            counts.1 += 1;
        }
    }
    counts
}

/// Dense projector onto the eigenvectors of `spec0` with eigenvalues in the
/// closed `window`.
pub fn energy_window_projector(spec0: &Spectrum, window: (f64, f64)) -> Result<LinearOperator> {
    let (below, inside, above) = window_counts(spec0.eigenvalues.iter().copied(), window);
    if inside == 0 {
        return Err(Error::EmptyWindow { e_min: window.0, e_max: window.1, below, above });
    }
    let cols: Vec<usize> =
        (0..spec0.dim()).filter(|&i| in_window(spec0.eigenvalues[i], window)).collect();
    let b = spec0.eigenvectors.select(Axis(1), &cols);
    let p = b.dot(&b.t().mapv(|z| z.conj()));
    Ok(LinearOperator::dense(p, OperatorKind::Projector))
}

pub(crate) fn is_in_window(e: f64, window: (f64, f64)) -> bool {
    in_window(e, window)
}

/// Something that can apply `U(tau)` and `U(tau)^H` to blocks of column vectors.
pub trait Propagate: Sync {
    fn dim(&self) -> usize;
    fn tau(&self) -> f64;
    fn forward(&self, block: ArrayView2<c64>) -> Result<Array2<c64>>;
    fn backward(&self, block: ArrayView2<c64>) -> Result<Array2<c64>>;
}

/// Dense `U(tau) = V exp(-i lambda tau) V^H`.
#[derive(Clone, Debug)]
pub struct Propagator {
    pub tau: f64,
    pub matrix: Array2<c64>,
}

/// Builds `U(tau)` from a spectrum.
pub fn propagator(spec: &Spectrum, tau: f64) -> Result<Propagator> {
    if !tau.is_finite() {
        return Err(Error::InvalidInput(format!("tau = {tau} must be finite")));
    }
    let v = &spec.eigenvectors;
    let mut scaled = v.clone();
    for (mut col, &lam) in scaled.axis_iter_mut(Axis(1)).zip(&spec.eigenvalues) {
        let phase = c64::from_polar(1.0, -lam * tau);
        col.mapv_inplace(|z| z * phase);
    }
    let matrix = scaled.dot(&v.t().mapv(|z| z.conj()));
    Ok(Propagator { tau, matrix })
}

impl Propagator {
    pub fn identity(dim: usize) -> Self {
        Self { tau: 0.0, matrix: Array2::eye(dim) }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn adjoint(&self) -> Array2<c64> {
        self.matrix.t().mapv(|z| z.conj())
    }

    /// `max |U U^H - 1|`.
    pub fn unitarity_error(&self) -> f64 {
        let p = self.matrix.dot(&self.adjoint());
        p.indexed_iter()
            .map(|((i, j), z)| (z - if i == j { c64::new(1.0, 0.0) } else { c64::new(0.0, 0.0) }).norm())
            .fold(0.0, f64::max)
    }

    /// `U(tau_1) U(tau_2)`, representing `U(tau_1 + tau_2)`.
    pub fn compose(&self, other: &Propagator) -> Propagator {
        Propagator { tau: self.tau + other.tau, matrix: self.matrix.dot(&other.matrix) }
    }
}

impl Propagate for Propagator {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn tau(&self) -> f64 {
        self.tau
    }

    fn forward(&self, block: ArrayView2<c64>) -> Result<Array2<c64>> {
        check_rows(self.dim(), block)?;
        Ok(self.matrix.dot(&block))
    }

    fn backward(&self, block: ArrayView2<c64>) -> Result<Array2<c64>> {
        check_rows(self.dim(), block)?;
        // U^H B = conj(U^T conj(B))
        Ok(self.matrix.t().dot(&block.mapv(|z| z.conj())).mapv(|z| z.conj()))
    }
}

pub(crate) fn check_rows(dim: usize, block: ArrayView2<c64>) -> Result<()> {
    if block.nrows() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: block.nrows() });
    }
    Ok(())
}

/// Top-left `k x k` corner; used by diagnostics on large matrices.
pub fn corner(m: &Array2<c64>, k: usize) -> Array2<c64> {
    let k = k.min(m.nrows()).min(m.ncols());
    m.slice(s![..k, ..k]).to_owned()
}
