//! Two coupled spin-1/2 ladders: geometry, sector bases, Hamiltonians and the
//! magnetization-difference observable.
//!
//! Sites are numbered `0..4n` internally (site `i + 1` in 1-based notation is
//! bit `i` of a basis word). The left ladder holds sites `0..2n` as two legs of
//! length `n` (`0..n` and `n..2n`), the right ladder holds `2n..4n`. Rungs join
//! site `i` to `i + n` within a ladder; the inter-ladder bonds join the second
//! leg (`n..2n`) to the third (`2n..3n`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::c64;
use crate::error::{Error, Result};
use crate::operator::{CsrMatrix, LinearOperator, OperatorKind};

/// Physical configuration of a ladder pair. Energies are in units of `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// Rungs per ladder; the system has `4 n` spins.
    pub n: usize,
    pub j: f64,
    pub delta: f64,
    /// Inter-ladder coupling as a fraction of `j`.
    pub beta: f64,
    /// `[e_min, e_max]` in units of `j`.
    pub energy_window: [f64; 2],
    pub total_sz: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self { n: 3, j: 1.0, delta: 1.0, beta: 0.5, energy_window: [-1.2, 0.6], total_sz: 0.0 }
    }
}

impl ModelParams {
    pub fn num_spins(&self) -> usize {
        4 * self.n
    }

    /// Energy window in absolute units.
    pub fn window(&self) -> (f64, f64) {
        (self.energy_window[0] * self.j, self.energy_window[1] * self.j)
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        Self { beta, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.n == 0 || self.num_spins() > 24 {
            return bad(format!("n = {} must satisfy 1 <= 4n <= 24", self.n));
        }
        if !(self.j.is_finite() && self.j > 0.0) {
            return bad(format!("J = {} must be positive", self.j));
        }
        if !self.delta.is_finite() {
            return bad("delta must be finite".into());
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad(format!("beta = {} must be >= 0", self.beta));
        }
        let [lo, hi] = self.energy_window;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return bad(format!("energy window [{lo}, {hi}] must satisfy e_min < e_max"));
        }
        up_count(self.num_spins(), self.total_sz).map(|_| ())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let params: Self = serde_json::from_str(&text)?;
        params.validate()?;
        Ok(params)
    }
}

/// Number of up spins for a sector, or an error if the sector is impossible.
pub fn up_count(num_spins: usize, total_sz: f64) -> Result<usize> {
    let up = num_spins as f64 / 2.0 + total_sz;
    let err = Error::ImpossibleSector { num_spins, total_sz };
    if !up.is_finite() || up < -1e-9 || up > num_spins as f64 + 1e-9 {
        return Err(err);
    }
    let rounded = up.round();
    if (up - rounded).abs() > 1e-9 {
        return Err(err);
    }
    Ok(rounded as usize)
}

/// Computational basis of a fixed-magnetization sector, in ascending word order.
#[derive(Clone, Debug)]
pub struct SectorBasis {
    pub num_spins: usize,
    pub total_sz: f64,
    states: Vec<u32>,
}

impl SectorBasis {
    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[u32] {
        &self.states
    }

    pub fn state(&self, index: usize) -> u32 {
        self.states[index]
    }

    /// Ordinal of a configuration; the exact inverse of [`Self::state`].
    pub fn index_of(&self, state: u32) -> Option<usize> {
        self.states.binary_search(&state).ok()
    }

    pub fn num_up(&self) -> usize {
        self.states.first().map_or(0, |s| s.count_ones() as usize)
    }
}

/// Enumerates all `num_spins`-bit words with `num_spins / 2 + total_sz` set bits.
pub fn build_basis(num_spins: usize, total_sz: f64) -> Result<SectorBasis> {
    if num_spins == 0 || num_spins > 24 {
        return Err(Error::InvalidInput(format!("num_spins = {num_spins} must be in 1..=24")));
    }
    let up = up_count(num_spins, total_sz)?;
    Ok(SectorBasis { num_spins, total_sz, states: words_with_popcount(num_spins, up) })
}

/// All `bits`-bit words with exactly `ones` set bits, ascending.
pub(crate) fn words_with_popcount(bits: usize, ones: usize) -> Vec<u32> {
    if ones == 0 {
        return vec![0];
    }
    let limit = 1u64 << bits;
    let mut out = Vec::new();
    let mut v: u64 = (1u64 << ones) - 1;
    while v < limit {
        out.push(v as u32);
        // next word with the same popcount (Gosper)
        let c = v & v.wrapping_neg();
        let r = v + c;
        v = (((r ^ v) >> 2) / c) | r;
    }
    out
}

/// A coupling `strength * (s^x s^x + s^y s^y + delta s^z s^z)` between two sites (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub strength: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BondList {
    bonds: Vec<Bond>,
}

impl BondList {
    pub fn new(bonds: Vec<Bond>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for bond in &bonds {
            if bond.a == bond.b {
                return Err(Error::InvalidInput(format!("bond joins site {} to itself", bond.a)));
            }
            if !bond.strength.is_finite() {
                return Err(Error::InvalidInput("bond strength must be finite".into()));
            }
            if !seen.insert((bond.a.min(bond.b), bond.a.max(bond.b))) {
                return Err(Error::InvalidInput(format!(
                    "duplicate bond ({}, {})",
                    bond.a + 1,
                    bond.b + 1
                )));
            }
        }
        Ok(Self { bonds })
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn len(&self) -> usize {
        self.bonds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bonds.is_empty()
    }

    /// Applies a site permutation `site -> perm[site]`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Self> {
        Self::new(
            self.bonds
                .iter()
                .map(|b| Bond { a: perm[b.a], b: perm[b.b], strength: b.strength })
                .collect(),
        )
    }

    pub fn concat(&self, other: &BondList) -> Result<Self> {
        Self::new(self.bonds.iter().chain(other.bonds.iter()).copied().collect())
    }
}

/// Leg and rung bonds of one ladder whose first site is `offset`.
fn single_ladder(n: usize, offset: usize, j: f64) -> Vec<Bond> {
    let mut bonds = Vec::with_capacity(3 * n);
    for leg in 0..2 {
        for p in 0..n.saturating_sub(1) {
            let a = offset + leg * n + p;
            bonds.push(Bond { a, b: a + 1, strength: j });
        }
    }
    for p in 0..n {
        bonds.push(Bond { a: offset + p, b: offset + p + n, strength: j });
    }
    bonds
}

/// Intra-ladder bonds (both ladders) and inter-ladder bonds of strength `j * beta`.
pub fn ladder_bonds(params: &ModelParams) -> Result<(BondList, BondList)> {
    let n = params.n;
    if n == 0 {
        return Err(Error::InvalidInput("n must be at least 1".into()));
    }
    let mut intra = single_ladder(n, 0, params.j);
    intra.extend(single_ladder(n, 2 * n, params.j));
    let inter = (n..2 * n).map(|i| Bond { a: i, b: i + n, strength: params.j * params.beta }).collect();
    Ok((BondList::new(intra)?, BondList::new(inter)?))
}

/// Bonds of a single ladder relabeled onto sites `0..2n`.
pub fn local_ladder_bonds(params: &ModelParams) -> Result<BondList> {
    BondList::new(single_ladder(params.n, 0, params.j))
}

/// XXZ Hamiltonian of an arbitrary bond list restricted to a sector.
pub fn hamiltonian_from_bonds(basis: &SectorBasis, bonds: &BondList, delta: f64) -> LinearOperator {
    let dim = basis.dim();
    let mut trip = Vec::with_capacity(dim * (bonds.len() + 1));
    for (row, &state) in basis.states().iter().enumerate() {
        let mut diag = 0.0;
        for bond in bonds.bonds() {
            let ua = (state >> bond.a) & 1;
            let ub = (state >> bond.b) & 1;
            if ua == ub {
                diag += 0.25 * delta * bond.strength;
            } else {
                diag -= 0.25 * delta * bond.strength;
                let flipped = state ^ ((1 << bond.a) | (1 << bond.b));
                let col = basis.index_of(flipped).expect("flip-flop stays in sector");
                trip.push((row, col, c64::new(0.5 * bond.strength, 0.0)));
            }
        }
        trip.push((row, row, c64::new(diag, 0.0)));
    }
    LinearOperator::sparse(CsrMatrix::from_triplets(dim, trip), OperatorKind::Hermitian)
}

fn check_basis(params: &ModelParams, basis: &SectorBasis) -> Result<()> {
    if basis.num_spins != params.num_spins() {
        return Err(Error::BasisMismatch { basis: basis.num_spins, expected: params.num_spins() });
    }
    Ok(())
}

/// `h_L + h_R (+ V if include_interaction)` on the sector.
pub fn build_hamiltonian(
    params: &ModelParams,
    basis: &SectorBasis,
    include_interaction: bool,
) -> Result<LinearOperator> {
    check_basis(params, basis)?;
    let (intra, inter) = ladder_bonds(params)?;
    let bonds = if include_interaction { intra.concat(&inter)? } else { intra };
    Ok(hamiltonian_from_bonds(basis, &bonds, params.delta))
}

/// Eigenvalue of `X` on a basis word of a `4n`-spin system.
pub fn magnetization_difference(state: u32, n: usize) -> i32 {
    let left_mask = (1u32 << (2 * n)) - 1;
    let up_left = (state & left_mask).count_ones() as i32;
    let up_right = (state >> (2 * n)).count_ones() as i32;
    // S^z_L - S^z_R = (up_L - n) - (up_R - n)
    up_left - up_right
}

/// Diagonal operator `X = sum_left s^z - sum_right s^z`.
pub fn build_observable_x(basis: &SectorBasis, n: usize) -> Result<LinearOperator> {
    if basis.num_spins != 4 * n {
        return Err(Error::BasisMismatch { basis: basis.num_spins, expected: 4 * n });
    }
    let diag: Vec<f64> =
        basis.states().iter().map(|&s| magnetization_difference(s, n) as f64).collect();
    Ok(LinearOperator::real_diagonal(&diag))
}

/// Diagonal total `S^z` operator.
pub fn total_sz_operator(basis: &SectorBasis) -> LinearOperator {
    let half = basis.num_spins as f64 / 2.0;
    let diag: Vec<f64> = basis.states().iter().map(|&s| s.count_ones() as f64 - half).collect();
    LinearOperator::real_diagonal(&diag)
}

/// Site permutation exchanging the two ladders (`i <-> i + 2n`).
pub fn swap_ladders_permutation(n: usize) -> Vec<usize> {
    (0..4 * n).map(|i| (i + 2 * n) % (4 * n)).collect()
}
