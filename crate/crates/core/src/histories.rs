//! Event projectors, history probabilities, the decoherence functional and the
//! non-consistency / non-Markovianity measures.
//!
//! A projector `pi` is stored as a factor `B` with orthonormal columns,
//! `pi = B B^H`, split into pieces supported on subsets of basis rows. A
//! history probability is evaluated by propagating the columns of
//! `sqrt(rho)` ("branches") and projecting at every measured slot, so no
//! `d x d` density matrix is ever formed on the main path.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2, Axis};
use ndarray_linalg::{Eigh, UPLO};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::c64;
use crate::error::{Error, Result};
use crate::operator::{LinearOperator, OperatorKind, PROJECTOR_TOL};
use crate::spectral::{is_in_window, window_counts, BlockSpectrum, Propagate, Propagator};

/// Denominators below this make a conditional probability undefined.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Outcome of one measurement: an `X` eigenvalue inside the energy window, or
/// the complement of all such events.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventLabel {
    X(i32),
    Complement,
}

impl fmt::Display for EventLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventLabel::X(x) => f.pad(&x.to_string()),
            EventLabel::Complement => f.pad("complement"),
        }
    }
}

impl FromStr for EventLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("complement") {
            return Ok(EventLabel::Complement);
        }
        t.parse::<i32>()
            .map(EventLabel::X)
            .map_err(|_| Error::InvalidInput(format!("`{s}` is neither an integer nor \"complement\"")))
    }
}

impl Serialize for EventLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            EventLabel::X(x) => s.serialize_i32(*x),
            EventLabel::Complement => s.serialize_str("complement"),
        }
    }
}

struct LabelVisitor {
    allow_unmeasured: bool,
}

impl serde::de::Visitor<'_> for LabelVisitor {
    type Value = Slot;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        if self.allow_unmeasured {
            f.write_str("an integer, \"complement\" or \"--\"")
        } else {
            f.write_str("an integer or \"complement\"")
        }
    }

    fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<Slot, E> {
        i32::try_from(v).map(|x| Slot::Measured(EventLabel::X(x))).map_err(E::custom)
    }

    fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<Slot, E> {
        i32::try_from(v).map(|x| Slot::Measured(EventLabel::X(x))).map_err(E::custom)
    }

    fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<Slot, E> {
        if v.trim() == "--" {
            return if self.allow_unmeasured {
                Ok(Slot::Unmeasured)
            } else {
                Err(E::custom("\"--\" is not an event label"))
            };
        }
        v.parse::<EventLabel>().map(Slot::Measured).map_err(E::custom)
    }
}

impl<'de> Deserialize<'de> for EventLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match d.deserialize_any(LabelVisitor { allow_unmeasured: false })? {
            Slot::Measured(l) => Ok(l),
            Slot::Unmeasured => unreachable!(),
        }
    }
}

/// One time slot of a history: a measurement with a given outcome, or no
/// measurement at all (written `--`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Measured(EventLabel),
    Unmeasured,
}

impl Slot {
    pub fn x(x: i32) -> Self {
        Slot::Measured(EventLabel::X(x))
    }

    pub fn label(&self) -> Option<EventLabel> {
        match self {
            Slot::Measured(l) => Some(*l),
            Slot::Unmeasured => None,
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slot::Measured(l) => l.fmt(f),
            Slot::Unmeasured => f.write_str("--"),
        }
    }
}

impl Serialize for Slot {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Slot::Measured(l) => l.serialize(s),
            Slot::Unmeasured => s.serialize_str("--"),
        }
    }
}

impl<'de> Deserialize<'de> for Slot {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        d.deserialize_any(LabelVisitor { allow_unmeasured: true })
    }
}

/// Parses `"2 -- 0"`, `"2,--,0"` or `"2 → -- → 0"` style paths.
pub fn parse_path(text: &str) -> Result<Vec<Slot>> {
    text.split(|c: char| c == ',' || c.is_whitespace() || c == '→' || c == '>')
        .filter(|t| !t.is_empty() && *t != "-")
        .map(|t| if t == "--" { Ok(Slot::Unmeasured) } else { t.parse().map(Slot::Measured) })
        .collect()
}

pub fn format_path(slots: &[Slot]) -> String {
    slots.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ")
}

/// Part of a projector factor supported on a subset of basis rows.
#[derive(Clone, Debug)]
pub struct Piece {
    pub rows: Vec<usize>,
    /// `rows.len() x rank`, orthonormal columns.
    pub basis: Array2<c64>,
}

/// Orthogonal projector `B B^H`. The complement of a large event family may be
/// kept implicit (`pieces == None`) and applied as `1 - sum of the others`.
#[derive(Clone, Debug)]
pub struct Projector {
    pub dim: usize,
    pub rank: usize,
    pub pieces: Option<Vec<Piece>>,
}

impl Projector {
    pub fn from_pieces(dim: usize, pieces: Vec<Piece>) -> Self {
        let pieces: Vec<Piece> = pieces.into_iter().filter(|p| p.basis.ncols() > 0).collect();
        let rank = pieces.iter().map(|p| p.basis.ncols()).sum();
        Self { dim, rank, pieces: Some(pieces) }
    }

    /// Projector onto the column span of an orthonormal `dim x r` factor.
    pub fn from_factor(factor: Array2<c64>) -> Self {
        let dim = factor.nrows();
        Self::from_pieces(dim, vec![Piece { rows: (0..dim).collect(), basis: factor }])
    }

    /// Projector onto a set of canonical basis vectors.
    pub fn coordinate(dim: usize, rows: Vec<usize>) -> Self {
        let r = rows.len();
        Self::from_pieces(dim, vec![Piece { rows, basis: Array2::eye(r) }])
    }

    pub fn is_explicit(&self) -> bool {
        self.pieces.is_some()
    }

    fn pieces(&self) -> Result<&[Piece]> {
        self.pieces
            .as_deref()
            .ok_or_else(|| Error::InvalidInput("projector is stored implicitly; no factor available".into()))
    }

    /// The `dim x rank` factor `B`.
    pub fn factor(&self) -> Result<Array2<c64>> {
        let mut out = Array2::zeros((self.dim, self.rank));
        let mut col = 0;
        for p in self.pieces()? {
            let r = p.basis.ncols();
            for (k, &row) in p.rows.iter().enumerate() {
                out.slice_mut(s![row, col..col + r]).assign(&p.basis.row(k));
            }
            col += r;
        }
        Ok(out)
    }

    /// `B^H Y`.
    pub fn coefficients(&self, y: ArrayView2<c64>) -> Result<Array2<c64>> {
        let mut out = Array2::zeros((self.rank, y.ncols()));
        let mut col = 0;
        for p in self.pieces()? {
            let r = p.basis.ncols();
            let sub = y.select(Axis(0), &p.rows);
            out.slice_mut(s![col..col + r, ..]).assign(&adjoint(&p.basis).dot(&sub));
            col += r;
        }
        Ok(out)
    }

    /// `B C`.
    pub fn embed(&self, c: ArrayView2<c64>) -> Result<Array2<c64>> {
        let mut out = Array2::zeros((self.dim, c.ncols()));
        let mut col = 0;
        for p in self.pieces()? {
            let r = p.basis.ncols();
            let part = p.basis.dot(&c.slice(s![col..col + r, ..]));
            for (k, &row) in p.rows.iter().enumerate() {
                let mut dst = out.row_mut(row);
                dst += &part.row(k);
            }
            col += r;
        }
        Ok(out)
    }

    fn project_explicit(&self, y: ArrayView2<c64>) -> Result<Array2<c64>> {
        let c = self.coefficients(y)?;
        self.embed(c.view())
    }

    pub fn to_dense(&self) -> Result<Array2<c64>> {
        let b = self.factor()?;
        Ok(b.dot(&adjoint(&b)))
    }

    pub fn to_operator(&self) -> Result<LinearOperator> {
        Ok(LinearOperator::dense(self.to_dense()?, OperatorKind::Projector))
    }
}

pub(crate) fn adjoint(m: &Array2<c64>) -> Array2<c64> {
    m.t().mapv(|z| z.conj())
}

pub(crate) fn frobenius_sq(m: ArrayView2<c64>) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

/// Complete family of mutually orthogonal projectors with their labels.
#[derive(Clone, Debug)]
pub struct ProjectorSet {
    pub dim: usize,
    pub labels: Vec<EventLabel>,
    pub projectors: Vec<Projector>,
}

impl ProjectorSet {
    /// Builds the family and checks rank accounting; at most one projector
    /// (the complement) may be implicit.
    pub fn new(dim: usize, labels: Vec<EventLabel>, projectors: Vec<Projector>) -> Result<Self> {
        if labels.len() != projectors.len() || labels.is_empty() {
            return Err(Error::IncompleteProjectors("label and projector counts differ".into()));
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::IncompleteProjectors(format!("duplicate label {l}")));
            }
        }
        if projectors.iter().any(|p| p.dim != dim) {
            return Err(Error::IncompleteProjectors("projector dimension differs from the set".into()));
        }
        let implicit: Vec<usize> =
            (0..projectors.len()).filter(|&i| !projectors[i].is_explicit()).collect();
        if implicit.len() > 1 {
            return Err(Error::IncompleteProjectors("more than one implicit projector".into()));
        }
        let total: usize = projectors.iter().map(|p| p.rank).sum();
        if total != dim {
            return Err(Error::IncompleteProjectors(format!("ranks sum to {total}, dimension is {dim}")));
        }
        Ok(Self { dim, labels, projectors })
    }

    /// Event projectors `pi_{x,E}` (window eigenvectors of `H0` in the `X = x`
    /// block) plus the complement (all other eigenvectors), ordered by
    /// ascending `x` with the complement last.
    pub fn from_energy_window(spectrum: &BlockSpectrum, window: (f64, f64)) -> Result<Self> {
        Self::build_from_window(spectrum, window, true)
    }

    /// As [`Self::from_energy_window`] but with the complement kept implicit,
    /// which avoids storing its (large) factor.
    pub fn from_energy_window_lean(spectrum: &BlockSpectrum, window: (f64, f64)) -> Result<Self> {
        Self::build_from_window(spectrum, window, false)
    }

    fn build_from_window(spectrum: &BlockSpectrum, window: (f64, f64), explicit_complement: bool) -> Result<Self> {
        let all = spectrum.blocks.iter().flat_map(|b| b.eigenvalues.iter().copied());
        let (below, inside, above) = window_counts(all, window);
        if inside == 0 {
            return Err(Error::EmptyWindow { e_min: window.0, e_max: window.1, below, above });
        }
        let mut blocks: Vec<&crate::spectral::XBlock> = spectrum.blocks.iter().collect();
        blocks.sort_by_key(|b| b.x);
        let mut labels = Vec::new();
        let mut projectors = Vec::new();
        let mut complement = Vec::new();
        let mut complement_rank = 0;
        for blk in blocks {
            let (inn, out): (Vec<usize>, Vec<usize>) =
                (0..blk.eigenvalues.len()).partition(|&c| is_in_window(blk.eigenvalues[c], window));
            labels.push(EventLabel::X(blk.x));
            projectors.push(Projector::from_pieces(
                spectrum.dim,
                vec![Piece { rows: blk.rows.clone(), basis: blk.eigenvectors.select(Axis(1), &inn) }],
            ));
            complement_rank += out.len();
            if explicit_complement {
                complement.push(Piece { rows: blk.rows.clone(), basis: blk.eigenvectors.select(Axis(1), &out) });
            }
        }
        labels.push(EventLabel::Complement);
        projectors.push(if explicit_complement {
            Projector::from_pieces(spectrum.dim, complement)
        } else {
            Projector { dim: spectrum.dim, rank: complement_rank, pieces: None }
        });
        Self::new(spectrum.dim, labels, projectors)
    }

    /// Partition of the canonical basis into `parts` contiguous groups with
    /// sizes differing by at most one (the first groups take the remainder).
    /// Labels are `X(0), X(1), ...`.
    pub fn equal_parts(dim: usize, parts: usize) -> Result<Self> {
        if parts == 0 || parts > dim {
            return Err(Error::InvalidInput(format!("cannot split dimension {dim} into {parts} parts")));
        }
        let (q, r) = (dim / parts, dim % parts);
        let mut start = 0;
        let mut projectors = Vec::new();
        for k in 0..parts {
            let len = q + usize::from(k < r);
            projectors.push(Projector::coordinate(dim, (start..start + len).collect()));
            start += len;
        }
        Self::new(dim, (0..parts as i32).map(EventLabel::X).collect(), projectors)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: EventLabel) -> Result<usize> {
        self.labels.iter().position(|&l| l == label).ok_or(Error::UnknownLabel(label))
    }

    pub fn get(&self, label: EventLabel) -> Result<&Projector> {
        Ok(&self.projectors[self.index_of(label)?])
    }

    pub fn rank(&self, label: EventLabel) -> Result<usize> {
        Ok(self.get(label)?.rank)
    }

    /// `pi_label Y`.
    pub fn project(&self, label: EventLabel, y: ArrayView2<c64>) -> Result<Array2<c64>> {
        let idx = self.index_of(label)?;
        if y.nrows() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: y.nrows() });
        }
        let p = &self.projectors[idx];
        if p.is_explicit() {
            return p.project_explicit(y);
        }
        let mut out = y.to_owned();
        for (j, q) in self.projectors.iter().enumerate() {
            if j != idx {
                out -= &q.project_explicit(y)?;
            }
        }
        Ok(out)
    }

    /// `||pi_label Y||_F^2`.
    pub fn projected_norm_sq(&self, label: EventLabel, y: ArrayView2<c64>) -> Result<f64> {
        let p = self.get(label)?;
        if p.is_explicit() {
            return Ok(frobenius_sq(p.coefficients(y)?.view()));
        }
        let mut total = frobenius_sq(y);
        for q in self.projectors.iter().filter(|q| q.is_explicit()) {
            total -= frobenius_sq(q.coefficients(y)?.view());
        }
        Ok(total.max(0.0))
    }

    /// Unitary `[B_1 B_2 ...]` whose column groups follow `labels`.
    pub fn full_factor(&self) -> Result<Array2<c64>> {
        let mut out = Array2::zeros((self.dim, self.dim));
        let mut col = 0;
        for p in &self.projectors {
            out.slice_mut(s![.., col..col + p.rank]).assign(&p.factor()?);
            col += p.rank;
        }
        Ok(out)
    }

    /// Largest deviation from orthogonality, idempotency and completeness,
    /// using dense arithmetic.
    pub fn verify(&self) -> Result<f64> {
        let q = self.full_factor()?;
        let gram = adjoint(&q).dot(&q);
        let err = gram
            .indexed_iter()
            .map(|((i, j), z)| (z - if i == j { c64::new(1.0, 0.0) } else { c64::new(0.0, 0.0) }).norm())
            .fold(0.0, f64::max);
        if err > PROJECTOR_TOL {
            return Err(Error::IncompleteProjectors(format!("factor Gram matrix deviates by {err:e}")));
        }
        Ok(err)
    }
}

/// Event projectors `pi_E pi_x pi_E` from a dense window projector and the
/// diagonal observable, plus `1 - sum_x pi_{x,E}`.
pub fn build_event_projectors(pi_e: &LinearOperator, x: &LinearOperator) -> Result<ProjectorSet> {
    let dim = pi_e.dim();
    let xd = x
        .diagonal_entries()
        .ok_or_else(|| Error::InvalidInput("X must be a diagonal operator".into()))?;
    if xd.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: xd.len() });
    }
    let xs: Vec<i32> = xd.iter().map(|z| z.re.round() as i32).collect();
    let mut distinct = xs.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let p = pi_e.to_dense();
    let mut labels = Vec::new();
    let mut projectors = Vec::new();
    let mut complement = Vec::new();
    for &xv in &distinct {
        let rows: Vec<usize> = (0..dim).filter(|&i| xs[i] == xv).collect();
        let others: Vec<usize> = (0..dim).filter(|&i| xs[i] != xv).collect();
        let leak = p
            .select(Axis(0), &rows)
            .select(Axis(1), &others)
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        if leak > PROJECTOR_TOL {
            return Err(Error::IncompleteProjectors(format!(
                "window projector couples X = {xv} to other blocks (max entry {leak:e})"
            )));
        }
        let sub = p.select(Axis(0), &rows).select(Axis(1), &rows);
        let (w, v) = sub.eigh(UPLO::Lower)?;
        if let Some(bad) = w.iter().find(|&&e| e.abs() > 1e-8 && (e - 1.0).abs() > 1e-8) {
            return Err(Error::IncompleteProjectors(format!("block X = {xv} has eigenvalue {bad}")));
        }
        let inn: Vec<usize> = (0..w.len()).filter(|&k| w[k] > 0.5).collect();
        let out: Vec<usize> = (0..w.len()).filter(|&k| w[k] <= 0.5).collect();
        labels.push(EventLabel::X(xv));
        projectors.push(Projector::from_pieces(
            dim,
            vec![Piece { rows: rows.clone(), basis: v.select(Axis(1), &inn) }],
        ));
        complement.push(Piece { rows, basis: v.select(Axis(1), &out) });
    }
    labels.push(EventLabel::Complement);
    projectors.push(Projector::from_pieces(dim, complement));
    ProjectorSet::new(dim, labels, projectors)
}

/// `rho = sum_i c_i pi_i` stored through its label populations
/// `P_i = c_i tr(pi_i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InitialState {
    pub populations: BTreeMap<EventLabel, f64>,
}

impl InitialState {
    /// `rho = pi_label / tr(pi_label)`.
    pub fn single(label: EventLabel) -> Self {
        Self { populations: BTreeMap::from([(label, 1.0)]) }
    }

    pub fn from_populations(pops: impl IntoIterator<Item = (EventLabel, f64)>) -> Self {
        Self { populations: pops.into_iter().collect() }
    }

    pub fn validate(&self, events: &ProjectorSet) -> Result<()> {
        let mut total = 0.0;
        for (&l, &p) in &self.populations {
            if !(p >= 0.0) {
                return Err(Error::InvalidInput(format!("population of {l} is {p}")));
            }
            if p > 0.0 && events.rank(l)? == 0 {
                return Err(Error::InvalidInput(format!("label {l} has rank 0 but population {p}")));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("initial populations sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Weights `c_i` of `rho = sum_i c_i pi_i`.
    pub fn weights(&self, events: &ProjectorSet) -> Result<Vec<(EventLabel, f64)>> {
        self.populations
            .iter()
            .filter(|(_, &p)| p > 0.0)
            .map(|(&l, &p)| Ok((l, p / events.rank(l)? as f64)))
            .collect()
    }

    /// Columns of `sqrt(rho)`, restricted to `only` when given.
    pub fn branches(&self, events: &ProjectorSet, only: Option<EventLabel>) -> Result<Array2<c64>> {
        let mut parts = Vec::new();
        for (l, c) in self.weights(events)? {
            if only.is_some_and(|o| o != l) {
                continue;
            }
            let f = events.get(l)?.factor()?;
            parts.push(f * c64::new(c.sqrt(), 0.0));
        }
        if parts.is_empty() {
            return Ok(Array2::zeros((events.dim, 0)));
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(ndarray::concatenate(Axis(1), &views).expect("equal row counts"))
    }

    pub fn to_dense(&self, events: &ProjectorSet) -> Result<Array2<c64>> {
        let mut rho = Array2::zeros((events.dim, events.dim));
        for (l, c) in self.weights(events)? {
            rho = rho + events.get(l)?.to_dense()? * c64::new(c, 0.0);
        }
        Ok(rho)
    }
}

/// A sequence of measured or unmeasured slots separated by `tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistorySpec {
    pub slots: Vec<Slot>,
    pub tau: f64,
    pub initial_state: InitialState,
}

impl HistorySpec {
    pub fn new(slots: Vec<Slot>, tau: f64, initial_state: InitialState) -> Self {
        Self { slots, tau, initial_state }
    }

    /// History whose initial state is `pi_{first label} / tr`.
    pub fn from_first_label(slots: Vec<Slot>, tau: f64) -> Result<Self> {
        let first = slots
            .first()
            .and_then(Slot::label)
            .ok_or_else(|| Error::InvalidInput("history must start with a measured slot".into()))?;
        Ok(Self::new(slots, tau, InitialState::single(first)))
    }

    pub fn measured_count(&self) -> usize {
        self.slots.iter().filter(|s| s.label().is_some()).count()
    }

    pub fn validate(&self, events: &ProjectorSet) -> Result<()> {
        if self.measured_count() == 0 {
            return Err(Error::InvalidInput("history has no measured slot".into()));
        }
        if self.slots.len() > 1 && !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidInput(format!("tau = {} must be positive", self.tau)));
        }
        for s in &self.slots {
            if let Some(l) = s.label() {
                events.index_of(l)?;
            }
        }
        self.initial_state.validate(events)
    }

    fn check_tau(&self, tau: f64) -> Result<()> {
        if self.slots.len() > 1 && (self.tau - tau).abs() > 1e-12 * self.tau.abs().max(1.0) {
            return Err(Error::TauMismatch { spec: self.tau, propagator: tau });
        }
        Ok(())
    }

    /// The same history without its final slot.
    pub fn without_last(&self) -> Self {
        let mut s = self.clone();
        s.slots.pop();
        s
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HistoryResult {
    /// Clamped to `[0, 1]`.
    pub probability: f64,
    pub raw_probability: f64,
    pub branch_count: usize,
    pub spec: HistorySpec,
}

fn clamp_probability(p: f64) -> f64 {
    p.clamp(0.0, 1.0)
}

/// Initial branches already projected by a measured first slot.
fn start_branches(spec: &HistorySpec, events: &ProjectorSet) -> Result<Array2<c64>> {
    match spec.slots[0] {
        Slot::Measured(l) => {
            // pi_l pi_i = 0 for i != l, so only the l-branches survive
            let b = spec.initial_state.branches(events, Some(l))?;
            if events.get(l)?.is_explicit() {
                Ok(b)
            } else {
                events.project(l, b.view())
            }
        }
        Slot::Unmeasured => spec.initial_state.branches(events, None),
    }
}

/// Branches after evolving through `slots[1..]`.
fn evolve<P: Propagate + ?Sized>(
    slots: &[Slot],
    mut y: Array2<c64>,
    u: &P,
    events: &ProjectorSet,
) -> Result<Array2<c64>> {
    let last = slots.iter().rposition(|s| s.label().is_some()).unwrap_or(0);
    for slot in &slots[1..=last.max(0)] {
        if y.ncols() == 0 {
            break;
        }
        y = u.forward(y.view())?;
        if let Slot::Measured(l) = slot {
            y = events.project(*l, y.view())?;
        }
    }
    Ok(y)
}

/// `tr{Pi_n U ... U Pi_1 rho}`, by branch propagation.
pub fn history_probability<P: Propagate + ?Sized>(
    spec: &HistorySpec,
    u: &P,
    events: &ProjectorSet,
) -> Result<HistoryResult> {
    spec.validate(events)?;
    spec.check_tau(u.tau())?;
    let y0 = start_branches(spec, events)?;
    let branch_count = y0.ncols();
    let y = if spec.slots.len() > 1 { evolve(&spec.slots, y0, u, events)? } else { y0 };
    let raw = frobenius_sq(y.view());
    Ok(HistoryResult { probability: clamp_probability(raw), raw_probability: raw, branch_count, spec: spec.clone() })
}

/// Same quantity by explicit density-matrix conjugation.
pub fn history_probability_density(spec: &HistorySpec, u: &Propagator, events: &ProjectorSet) -> Result<f64> {
    spec.validate(events)?;
    spec.check_tau(u.tau)?;
    let ud = adjoint(&u.matrix);
    let mut rho = spec.initial_state.to_dense(events)?;
    for (k, slot) in spec.slots.iter().enumerate() {
        if k > 0 {
            rho = u.matrix.dot(&rho).dot(&ud);
        }
        if let Slot::Measured(l) = slot {
            let p = events.get(*l)?.to_dense()?;
            rho = p.dot(&rho).dot(&p);
        }
    }
    Ok(rho.diag().iter().map(|z| z.re).sum())
}

/// `P(x_1..x_n) / P(x_1..x_{n-1})`.
pub fn conditional_probability<P: Propagate + ?Sized>(
    spec_long: &HistorySpec,
    events: &ProjectorSet,
    u: &P,
) -> Result<f64> {
    if spec_long.measured_count() < 2 || spec_long.slots.last().and_then(Slot::label).is_none() {
        return Err(Error::InvalidInput("conditional needs >= 2 measured slots, the last one measured".into()));
    }
    let den = history_probability(&spec_long.without_last(), u, events)?.raw_probability;
    if den <= PROBABILITY_FLOOR {
        return Err(Error::UndefinedConditional { denominator: den, floor: PROBABILITY_FLOOR });
    }
    let num = history_probability(spec_long, u, events)?.raw_probability;
    Ok((num / den).clamp(0.0, 1.0 + 1e-9))
}

/// Sum of history probabilities over every labelling of the unmeasured slots.
pub fn sum_over_gaps<P: Propagate + ?Sized>(spec: &HistorySpec, u: &P, events: &ProjectorSet) -> Result<f64> {
    spec.validate(events)?;
    spec.check_tau(u.tau())?;
    if spec.slots[0] == Slot::Unmeasured {
        let mut total = 0.0;
        for &l in &events.labels {
            let mut s = spec.clone();
            s.slots[0] = Slot::Measured(l);
            if spec.initial_state.populations.get(&l).copied().unwrap_or(0.0) > 0.0 {
                total += sum_over_gaps(&s, u, events)?;
            }
        }
        return Ok(total);
    }
    let last = spec.slots.iter().rposition(|s| s.label().is_some()).unwrap_or(0);
    gap_recursion(&spec.slots[..=last], 1, start_branches(spec, events)?, u, events)
}

fn gap_recursion<P: Propagate + ?Sized>(
    slots: &[Slot],
    k: usize,
    y: Array2<c64>,
    u: &P,
    events: &ProjectorSet,
) -> Result<f64> {
    if k == slots.len() || y.ncols() == 0 {
        return Ok(frobenius_sq(y.view()));
    }
    let y = u.forward(y.view())?;
    match slots[k] {
        Slot::Measured(l) => gap_recursion(slots, k + 1, events.project(l, y.view())?, u, events),
        Slot::Unmeasured => {
            let mut total = 0.0;
            for &l in &events.labels {
                total += gap_recursion(slots, k + 1, events.project(l, y.view())?, u, events)?;
            }
            Ok(total)
        }
    }
}

/// `|1 - P(path) / sum over gap labellings|`.
pub fn nonconsistency<P: Propagate + ?Sized>(path: &HistorySpec, events: &ProjectorSet, u: &P) -> Result<f64> {
    if !path.slots.contains(&Slot::Unmeasured) {
        return Err(Error::InvalidInput("non-consistency needs at least one unmeasured slot".into()));
    }
    let summed = sum_over_gaps(path, u, events)?;
    if summed <= PROBABILITY_FLOOR {
        return Err(Error::UndefinedConditional { denominator: summed, floor: PROBABILITY_FLOOR });
    }
    let gap = history_probability(path, u, events)?.raw_probability;
    Ok((1.0 - gap / summed).abs())
}

/// All addends `D_ij = tr{pi_3 U pi_i U pi_1 rho pi_1 U^H pi_j U^H}`, indexed
/// by the positions of `i` and `j` in `events.labels`.
pub fn decoherence_terms<P: Propagate + ?Sized>(
    x1: EventLabel,
    x3: EventLabel,
    events: &ProjectorSet,
    u: &P,
    rho: &InitialState,
) -> Result<Array2<c64>> {
    rho.validate(events)?;
    let phi = events.project(x1, rho.branches(events, None)?.view())?;
    let y = u.forward(phi.view())?;
    let p3 = events.get(x3)?;
    let mut w = Vec::with_capacity(events.len());
    for &l in &events.labels {
        let yi = u.forward(events.project(l, y.view())?.view())?;
        w.push(if p3.is_explicit() { p3.coefficients(yi.view())? } else { events.project(x3, yi.view())? });
    }
    let n = w.len();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        w[i].iter().zip(w[j].iter()).map(|(a, b)| b.conj() * a).sum::<c64>()
    }))
}

/// `sum_{i != j} tr{pi_3 U pi_i U pi_1 rho pi_1 U^H pi_j U^H}`.
pub fn decoherence_offdiagonal<P: Propagate + ?Sized>(
    x1: EventLabel,
    x3: EventLabel,
    events: &ProjectorSet,
    u: &P,
    rho: &InitialState,
) -> Result<c64> {
    let d = decoherence_terms(x1, x3, events, u, rho)?;
    Ok(d.indexed_iter().filter(|((i, j), _)| i != j).map(|(_, z)| *z).sum())
}

/// `|1 - w(x_{n+1} | x_{k-1}..x_n) / w(x_{n+1} | x_k..x_n)|`; the shorter
/// conditional starts from `pi_{x_k} / tr`.
pub fn nonmarkovianity<P: Propagate + ?Sized>(path: &HistorySpec, events: &ProjectorSet, u: &P) -> Result<f64> {
    if path.measured_count() < 3 {
        return Err(Error::InvalidInput("non-Markovianity needs at least 3 measured slots".into()));
    }
    let long = conditional_probability(path, events, u)?;
    let short_spec = HistorySpec::from_first_label(path.slots[1..].to_vec(), path.tau)?;
    let short = conditional_probability(&short_spec, events, u)?;
    if short <= PROBABILITY_FLOOR {
        return Err(Error::UndefinedConditional { denominator: short, floor: PROBABILITY_FLOOR });
    }
    Ok((1.0 - long / short).abs())
}

/// `U` in the eigenbasis of a complete explicit event family:
/// `W = Q^H U Q` with `Q = [B_1 B_2 ...]`, so that the block `(a, b)` is
/// `B_a^H U B_b` and a history becomes a product of small blocks.
#[derive(Clone, Debug)]
pub struct TransferBlocks {
    pub labels: Vec<EventLabel>,
    pub offsets: Vec<usize>,
    pub tau: f64,
    pub w: Array2<c64>,
}

impl TransferBlocks {
    pub fn new<P: Propagate + ?Sized>(events: &ProjectorSet, u: &P) -> Result<Self> {
        let q = events.full_factor()?;
        let uq = u.forward(q.view())?;
        let w = adjoint(&q).dot(&uq);
        let mut offsets = vec![0];
        for p in &events.projectors {
            offsets.push(offsets.last().unwrap() + p.rank);
        }
        Ok(Self { labels: events.labels.clone(), offsets, tau: u.tau(), w })
    }

    fn range(&self, label: EventLabel) -> Result<std::ops::Range<usize>> {
        let i = self.labels.iter().position(|&l| l == label).ok_or(Error::UnknownLabel(label))?;
        Ok(self.offsets[i]..self.offsets[i + 1])
    }

    pub fn rank(&self, label: EventLabel) -> Result<usize> {
        Ok(self.range(label)?.len())
    }

    /// `B_a^H U B_b`.
    pub fn block(&self, a: EventLabel, b: EventLabel) -> Result<ArrayView2<'_, c64>> {
        let (ra, rb) = (self.range(a)?, self.range(b)?);
        Ok(self.w.slice(s![ra, rb]))
    }

    /// History probability in event coordinates.
    pub fn history_probability(&self, spec: &HistorySpec) -> Result<f64> {
        if spec.measured_count() == 0 {
            return Err(Error::InvalidInput("history has no measured slot".into()));
        }
        spec.check_tau(self.tau)?;
        let dim = self.w.nrows();
        // state: coordinates restricted to `cur` (or all coordinates)
        let mut cur: Option<EventLabel> = None;
        let mut y: Array2<c64> = {
            let mut cols = Vec::new();
            for (&l, &p) in &spec.initial_state.populations {
                if p > 0.0 {
                    let r = self.range(l)?;
                    let scale = (p / r.len() as f64).sqrt();
                    cols.extend(r.map(|i| (i, scale)));
                }
            }
            let mut y = Array2::zeros((dim, cols.len()));
            for (c, (i, v)) in cols.into_iter().enumerate() {
                y[[i, c]] = c64::new(v, 0.0);
            }
            y
        };
        let last = spec.slots.iter().rposition(|s| s.label().is_some()).unwrap();
        for (k, slot) in spec.slots[..=last].iter().enumerate() {
            if k > 0 {
                let src = match cur {
                    Some(a) => self.w.slice(s![.., self.range(a)?]),
                    None => self.w.view(),
                };
                y = match slot {
                    Slot::Measured(b) => src.slice(s![self.range(*b)?, ..]).dot(&y),
                    Slot::Unmeasured => src.dot(&y),
                };
                cur = slot.label();
            } else if let Slot::Measured(a) = slot {
                y = y.slice(s![self.range(*a)?, ..]).to_owned();
                cur = Some(*a);
            }
        }
        Ok(frobenius_sq(y.view()))
    }
}

/// Meet-in-the-middle evaluator for three-slot histories
/// `first -> (gamma | --) -> last` with `rho = pi_first / tr`, needing only
/// `rank(first)` forward and `rank(last)` backward propagations.
#[derive(Clone, Debug)]
pub struct ThreeSlotEvaluator {
    pub first: EventLabel,
    pub last: EventLabel,
    /// `U B_first / sqrt(r_first)`.
    forward: Array2<c64>,
    /// `U^H B_last`.
    backward: Array2<c64>,
    /// Per explicit label `gamma`: `(B_gamma^H D, B_gamma^H C)`.
    coeffs: Vec<(EventLabel, Array2<c64>, Array2<c64>)>,
    /// Label of an implicit complement, if any.
    implicit: Option<EventLabel>,
    rank_last: usize,
}

impl ThreeSlotEvaluator {
    pub fn new<P: Propagate + ?Sized>(
        events: &ProjectorSet,
        u: &P,
        first: EventLabel,
        last: EventLabel,
    ) -> Result<Self> {
        let pf = events.get(first)?;
        let pl = events.get(last)?;
        if pf.rank == 0 {
            return Err(Error::InvalidInput(format!("label {first} has rank 0")));
        }
        let bf = pf.factor()?;
        let bl = pl.factor()?;
        let forward = u.forward(bf.view())? * c64::new(1.0 / (pf.rank as f64).sqrt(), 0.0);
        let backward = u.backward(bl.view())?;
        let mut coeffs = Vec::new();
        let mut implicit = None;
        for (l, p) in events.labels.iter().zip(&events.projectors) {
            if p.is_explicit() {
                coeffs.push((*l, p.coefficients(forward.view())?, p.coefficients(backward.view())?));
            } else {
                implicit = Some(*l);
            }
        }
        Ok(Self { first, last, forward, backward, coeffs, implicit, rank_last: pl.rank })
    }

    /// `P(first, --, last)`.
    pub fn gap(&self) -> f64 {
        frobenius_sq(adjoint(&self.backward).dot(&self.forward).view())
    }

    /// `C^H pi_gamma D` for one label.
    fn through(&self, gamma: EventLabel) -> Result<Array2<c64>> {
        if Some(gamma) == self.implicit {
            let mut m = adjoint(&self.backward).dot(&self.forward);
            for (_, d, c) in &self.coeffs {
                m -= &adjoint(c).dot(d);
            }
            return Ok(m);
        }
        let (_, d, c) =
            self.coeffs.iter().find(|(l, _, _)| *l == gamma).ok_or(Error::UnknownLabel(gamma))?;
        Ok(adjoint(c).dot(d))
    }

    /// `P(first, gamma, last)`.
    pub fn via(&self, gamma: EventLabel) -> Result<f64> {
        Ok(frobenius_sq(self.through(gamma)?.view()))
    }

    /// `sum_gamma P(first, gamma, last)`.
    pub fn summed(&self) -> Result<f64> {
        let mut labels: Vec<EventLabel> = self.coeffs.iter().map(|c| c.0).collect();
        labels.extend(self.implicit);
        labels.into_iter().map(|l| self.via(l)).sum()
    }

    /// `P(first, gamma)`.
    pub fn two_slot(&self, gamma: EventLabel) -> Result<f64> {
        if Some(gamma) == self.implicit {
            let explicit: f64 = self.coeffs.iter().map(|(_, d, _)| frobenius_sq(d.view())).sum();
            return Ok((frobenius_sq(self.forward.view()) - explicit).max(0.0));
        }
        let (_, d, _) = self.coeffs.iter().find(|(l, _, _)| *l == gamma).ok_or(Error::UnknownLabel(gamma))?;
        Ok(frobenius_sq(d.view()))
    }

    /// `P(gamma, last)` with `rho = pi_gamma / tr`, for explicit `gamma`.
    pub fn two_slot_into_last(&self, gamma: EventLabel) -> Result<f64> {
        let (_, _, c) = self.coeffs.iter().find(|(l, _, _)| *l == gamma).ok_or(Error::UnknownLabel(gamma))?;
        let r = c.nrows();
        if r == 0 || self.rank_last == 0 {
            return Ok(0.0);
        }
        Ok(frobenius_sq(c.view()) / r as f64)
    }

    /// Non-consistency of `first -> -- -> last`.
    pub fn nonconsistency(&self) -> Result<f64> {
        let summed = self.summed()?;
        if summed <= PROBABILITY_FLOOR {
            return Err(Error::UndefinedConditional { denominator: summed, floor: PROBABILITY_FLOOR });
        }
        Ok((1.0 - self.gap() / summed).abs())
    }

    /// Non-Markovianity of `first -> mid -> last`.
    pub fn nonmarkovianity(&self, mid: EventLabel) -> Result<f64> {
        let den = self.two_slot(mid)?;
        if den <= PROBABILITY_FLOOR {
            return Err(Error::UndefinedConditional { denominator: den, floor: PROBABILITY_FLOOR });
        }
        let long = self.via(mid)? / den;
        let short = self.two_slot_into_last(mid)?;
        if short <= PROBABILITY_FLOOR {
            return Err(Error::UndefinedConditional { denominator: short, floor: PROBABILITY_FLOOR });
        }
        Ok((1.0 - long / short).abs())
    }
}

/// One row of a history results file.
#[derive(Clone, Debug, Serialize)]
pub struct HistoryRecord {
    pub spec_id: String,
    pub probability: f64,
    pub metric: f64,
    pub wall_time: f64,
}

pub fn write_history_csv<W: Write>(mut w: W, records: &[HistoryRecord]) -> std::io::Result<()> {
    writeln!(w, "spec_id,probability,metric,wall_time")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.spec_id, r.probability, r.metric, r.wall_time)?;
    }
    Ok(())
}

/// Times a closure, returning its value and the elapsed seconds.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed().as_secs_f64())
}
