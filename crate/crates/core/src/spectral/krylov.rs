//! Lanczos approximation of `exp(-i H tau) psi` with adaptive sub-stepping.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use ndarray_linalg::{Eigh, UPLO};
use rayon::prelude::*;

use super::{check_rows, Propagate};
use crate::c64;
use crate::error::{Error, Result};
use crate::operator::{LinearOperator, Representation};

#[derive(Clone, Copy, Debug)]
pub struct KrylovOptions {
    pub subspace_dim: usize,
    /// Accepted local error per unit of `|tau|`, scaled by sub-step length.
    pub tolerance: f64,
    pub max_substeps: usize,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        Self { subspace_dim: 30, tolerance: 1e-10, max_substeps: 100_000 }
    }
}

#[derive(Clone, Debug)]
pub struct KrylovOutcome {
    pub state: Array1<c64>,
    pub substeps: usize,
    /// Sum of accepted local error estimates.
    pub error_estimate: f64,
}

fn apply_into(h: &LinearOperator, x: &[c64], y: &mut [c64]) {
    match &h.repr {
        Representation::Sparse(m) => m.matvec_into(x, y),
        Representation::Diagonal(d) => {
            for ((o, a), b) in y.iter_mut().zip(x).zip(d.iter()) {
                *o = a * b;
            }
        }
        Representation::Dense(m) => {
            let out = m.dot(&ndarray::aview1(x));
            y.copy_from_slice(out.as_slice().expect("contiguous"));
        }
    }
}

fn dot(a: &[c64], b: &[c64]) -> c64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[c64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

struct Lanczos {
    basis: Vec<Vec<c64>>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    /// Residual norm after the last vector; zero on breakdown.
    beta_last: f64,
}

fn lanczos(h: &LinearOperator, v0: &[c64], m: usize) -> Lanczos {
    let dim = v0.len();
    let m = m.min(dim);
    let mut basis: Vec<Vec<c64>> = vec![v0.to_vec()];
    let mut alpha = Vec::with_capacity(m);
    let mut beta = Vec::with_capacity(m);
    let mut w = vec![c64::new(0.0, 0.0); dim];
    let scale = 1e-13;
    loop {
        let j = basis.len() - 1;
        apply_into(h, &basis[j], &mut w);
        let a = dot(&basis[j], &w).re;
        alpha.push(a);
        // full reorthogonalization, twice
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &w);
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= c * qi;
                }
            }
        }
        let b = norm(&w);
        if basis.len() == m || b <= scale * (a.abs() + beta.last().copied().unwrap_or(0.0)).max(1.0) {
            let beta_last = if basis.len() == m && b > scale { b } else { 0.0 };
            return Lanczos { basis, alpha, beta, beta_last };
        }
        beta.push(b);
        basis.push(w.iter().map(|z| z / b).collect());
    }
}

/// `exp(-i T dt) e_1` for the real symmetric tridiagonal `T`.
fn tridiagonal_expm_e1(alpha: &[f64], beta: &[f64], dt: f64) -> Result<Vec<c64>> {
    let k = alpha.len();
    let mut t = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        t[[i, i]] = alpha[i];
        if i + 1 < k {
            t[[i, i + 1]] = beta[i];
            t[[i + 1, i]] = beta[i];
        }
    }
    let (w, q) = t.eigh(UPLO::Lower)?;
    let coeffs: Vec<c64> =
        (0..k).map(|j| c64::from_polar(q[[0, j]], -w[j] * dt)).collect();
    Ok((0..k).map(|i| (0..k).map(|j| coeffs[j] * q[[i, j]]).sum()).collect())
}

/// `exp(-i H tau) psi` for unit-norm `psi`.
pub fn krylov_step(
    h: &LinearOperator,
    state: &Array1<c64>,
    tau: f64,
    subspace_dim: usize,
) -> Result<Array1<c64>> {
    let opts = KrylovOptions { subspace_dim, ..Default::default() };
    let n = norm(state.as_slice().expect("contiguous state"));
    if (n - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidInput(format!("state norm {n} differs from 1 by more than 1e-10")));
    }
    Ok(krylov_step_with(h, state, tau, &opts)?.state)
}

/// Sub-stepped Lanczos propagation of an arbitrary (not necessarily
/// normalized) vector.
pub fn krylov_step_with(
    h: &LinearOperator,
    state: &Array1<c64>,
    tau: f64,
    opts: &KrylovOptions,
) -> Result<KrylovOutcome> {
    if opts.subspace_dim < 8 {
        return Err(Error::InvalidInput(format!(
            "subspace_dim = {} must be at least 8",
            opts.subspace_dim
        )));
    }
    if !tau.is_finite() {
        return Err(Error::InvalidInput(format!("tau = {tau} must be finite")));
    }
    if state.len() != h.dim() {
        return Err(Error::DimensionMismatch { expected: h.dim(), got: state.len() });
    }
    let mut v: Vec<c64> = state.to_vec();
    let amplitude = norm(&v);
    if amplitude == 0.0 || tau == 0.0 {
        return Ok(KrylovOutcome { state: state.clone(), substeps: 0, error_estimate: 0.0 });
    }
    v.iter_mut().for_each(|z| *z /= amplitude);

    let total = tau.abs();
    let sign = tau.signum();
    let mut done = 0.0;
    let mut dt = total;
    let mut substeps = 0;
    let mut error_estimate = 0.0;
    let mut last_err = f64::INFINITY;
    while done < total {
        dt = dt.min(total - done);
        let lz = lanczos(h, &v, opts.subspace_dim);
        let mut attempts = 0;
        loop {
            if substeps + attempts >= opts.max_substeps {
                return Err(Error::KrylovNonConvergence { substeps: substeps + attempts, achieved: last_err });
            }
            let c = tridiagonal_expm_e1(&lz.alpha, &lz.beta, sign * dt)?;
            let err = lz.beta_last * c.last().map(|z| z.norm()).unwrap_or(0.0);
            last_err = err;
            if err <= opts.tolerance * dt / total || lz.beta_last == 0.0 {
                let mut next = vec![c64::new(0.0, 0.0); v.len()];
                for (coef, q) in c.iter().zip(&lz.basis) {
                    for (o, qi) in next.iter_mut().zip(q) {
                        *o += coef * qi;
                    }
                }
                // the Krylov image of a unit vector is unit up to the error estimate
                let nn = norm(&next);
                next.iter_mut().for_each(|z| *z /= nn);
                v = next;
                done += dt;
                substeps += 1;
                error_estimate += err;
                if err < 0.1 * opts.tolerance * dt / total {
                    dt *= 1.5;
                }
                break;
            }
            attempts += 1;
            dt *= 0.5;
        }
    }
    let out: Array1<c64> = v.into_iter().map(|z| z * amplitude).collect();
    Ok(KrylovOutcome { state: out, substeps, error_estimate })
}

/// Matrix-free `U(tau)` built on [`krylov_step_with`]; columns are propagated
/// in parallel.
#[derive(Clone, Debug)]
pub struct KrylovPropagator {
    pub hamiltonian: Arc<LinearOperator>,
    pub tau: f64,
    pub options: KrylovOptions,
}

impl KrylovPropagator {
    pub fn new(hamiltonian: Arc<LinearOperator>, tau: f64) -> Self {
        Self { hamiltonian, tau, options: KrylovOptions::default() }
    }

    fn apply(&self, block: ArrayView2<c64>, tau: f64) -> Result<Array2<c64>> {
        check_rows(self.hamiltonian.dim(), block)?;
        let cols: Vec<Array1<c64>> = (0..block.ncols())
            .into_par_iter()
            .map(|j| {
                krylov_step_with(&self.hamiltonian, &block.column(j).to_owned(), tau, &self.options)
                    .map(|o| o.state)
            })
            .collect::<Result<_>>()?;
        let mut out = Array2::zeros(block.raw_dim());
        for (mut dst, src) in out.axis_iter_mut(Axis(1)).zip(cols) {
            dst.assign(&src);
        }
        Ok(out)
    }
}

impl Propagate for KrylovPropagator {
    fn dim(&self) -> usize {
        self.hamiltonian.dim()
    }

    fn tau(&self) -> f64 {
        self.tau
    }

    fn forward(&self, block: ArrayView2<c64>) -> Result<Array2<c64>> {
        self.apply(block, self.tau)
    }

    fn backward(&self, block: ArrayView2<c64>) -> Result<Array2<c64>> {
        self.apply(block, -self.tau)
    }
}
