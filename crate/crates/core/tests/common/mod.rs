//! Brute-force reference: the ladder pair on the full 2^N space built from
//! Kronecker products, event projectors from per-block diagonalization, and
//! history probabilities by explicit density-matrix conjugation.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use ndarray_linalg::{Eigh, UPLO};
use spinhist::c64;
use spinhist::histories::{EventLabel, Slot};

pub struct Oracle {
    pub num_spins: usize,
    pub h: Array2<c64>,
    pub projectors: BTreeMap<EventLabel, Array2<c64>>,
    evals: Vec<f64>,
    evecs: Array2<c64>,
}

fn kron(a: &Array2<c64>, b: &Array2<c64>) -> Array2<c64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    Array2::from_shape_fn((ar * br, ac * bc), |(i, j)| a[[i / br, j / bc]] * b[[i % br, j % bc]])
}

fn site_op(op: &Array2<c64>, site: usize, n: usize) -> Array2<c64> {
    let id = Array2::<c64>::eye(2);
    let mut out = Array2::<c64>::eye(1);
    for s in 0..n {
        out = kron(&out, if s == site { op } else { &id });
    }
    out
}

fn dagger(a: &Array2<c64>) -> Array2<c64> {
    a.t().mapv(|z| z.conj())
}

fn re(v: f64) -> c64 {
    c64::new(v, 0.0)
}

impl Oracle {
    /// `rungs` rungs per ladder, so `4 * rungs` spins.
    pub fn new(rungs: usize, delta: f64, beta: f64, window: (f64, f64)) -> Self {
        let n = 4 * rungs;
        let sz = Array2::from_shape_vec((2, 2), vec![re(0.5), re(0.0), re(0.0), re(-0.5)]).unwrap();
        let sp = Array2::from_shape_vec((2, 2), vec![re(0.0), re(1.0), re(0.0), re(0.0)]).unwrap();
        let szs: Vec<_> = (0..n).map(|i| site_op(&sz, i, n)).collect();
        let sps: Vec<_> = (0..n).map(|i| site_op(&sp, i, n)).collect();
        let bond = |a: usize, b: usize, j: f64| -> Array2<c64> {
            let flip = sps[a].dot(&dagger(&sps[b])) + dagger(&sps[a]).dot(&sps[b]);
            (flip * re(0.5) + szs[a].dot(&szs[b]) * re(delta)) * re(j)
        };
        let dim = 1usize << n;
        let mut h0 = Array2::<c64>::zeros((dim, dim));
        // ladder L on sites 0..2r, ladder R on 2r..4r; legs are consecutive runs of r sites
        for ladder in 0..2 {
            let base = 2 * rungs * ladder;
            for leg in 0..2 {
                for p in 0..rungs - 1 {
                    let a = base + leg * rungs + p;
                    h0 += &bond(a, a + 1, 1.0);
                }
            }
            for p in 0..rungs {
                h0 += &bond(base + p, base + rungs + p, 1.0);
            }
        }
        let mut h = h0.clone();
        for p in 0..rungs {
            h += &bond(rungs + p, 2 * rungs + p, beta);
        }

        let diag = |ops: &[Array2<c64>]| -> Vec<f64> {
            let total = ops.iter().fold(Array2::<c64>::zeros((dim, dim)), |acc, o| acc + o);
            total.diag().iter().map(|z| z.re).collect()
        };
        let sz_tot = diag(&szs);
        let sz_left = diag(&szs[..2 * rungs]);
        let sz_right = diag(&szs[2 * rungs..]);

        let mut projectors = BTreeMap::new();
        let mut sector = Array2::<c64>::zeros((dim, dim));
        for k in 0..dim {
            if sz_tot[k].abs() < 1e-9 {
                sector[[k, k]] = re(1.0);
            }
        }
        let mut covered = Array2::<c64>::zeros((dim, dim));
        let xmax = 2 * rungs as i32;
        for x in -xmax..=xmax {
            let idx: Vec<usize> = (0..dim)
                .filter(|&k| sz_tot[k].abs() < 1e-9 && ((sz_left[k] - sz_right[k]) - x as f64).abs() < 1e-9)
                .collect();
            let mut p = Array2::<c64>::zeros((dim, dim));
            if !idx.is_empty() {
                let sub = Array2::from_shape_fn((idx.len(), idx.len()), |(a, b)| h0[[idx[a], idx[b]]]);
                let (w, v) = sub.eigh(UPLO::Upper).unwrap();
                for (c, &e) in w.iter().enumerate() {
                    if e >= window.0 - 1e-12 && e <= window.1 + 1e-12 {
                        for (a, &ia) in idx.iter().enumerate() {
                            for (b, &ib) in idx.iter().enumerate() {
                                p[[ia, ib]] += v[[a, c]] * v[[b, c]].conj();
                            }
                        }
                    }
                }
            }
            covered += &p;
            projectors.insert(EventLabel::X(x), p);
        }
        projectors.insert(EventLabel::Complement, sector - covered);

        let (evals, evecs) = h.eigh(UPLO::Upper).unwrap();
        Self { num_spins: n, h, projectors, evals: evals.to_vec(), evecs }
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn rank(&self, label: EventLabel) -> usize {
        self.projectors[&label].diag().iter().map(|z| z.re).sum::<f64>().round() as usize
    }

    pub fn unitary(&self, tau: f64) -> Array2<c64> {
        let mut scaled = self.evecs.clone();
        for (mut col, &e) in scaled.axis_iter_mut(Axis(1)).zip(&self.evals) {
            col.mapv_inplace(|z| z * c64::from_polar(1.0, -e * tau));
        }
        scaled.dot(&dagger(&self.evecs))
    }

    /// `sum_x p_x pi_x / tr(pi_x)`.
    pub fn state(&self, populations: &[(EventLabel, f64)]) -> Array2<c64> {
        let mut rho = Array2::<c64>::zeros((self.dim(), self.dim()));
        for &(l, p) in populations {
            if p > 0.0 {
                rho += &(&self.projectors[&l] * re(p / self.rank(l) as f64));
            }
        }
        rho
    }

    pub fn history_probability(&self, slots: &[Slot], tau: f64, rho: &Array2<c64>) -> f64 {
        let u = self.unitary(tau);
        let ud = dagger(&u);
        let mut r = rho.clone();
        for (k, s) in slots.iter().enumerate() {
            if k > 0 {
                r = u.dot(&r).dot(&ud);
            }
            if let Slot::Measured(l) = s {
                let p = &self.projectors[l];
                r = p.dot(&r).dot(p);
            }
        }
        r.diag().iter().map(|z| z.re).sum()
    }

    /// `sum over gamma != gamma'` of `tr{C_gamma rho C_gamma'^H}` where the
    /// class operators fill every unmeasured slot with a label.
    pub fn offdiagonal_functional(&self, slots: &[Slot], tau: f64, rho: &Array2<c64>) -> f64 {
        let u = self.unitary(tau);
        // rho = S S^H
        let (w, v) = rho.eigh(UPLO::Upper).unwrap();
        let keep: Vec<usize> = (0..w.len()).filter(|&k| w[k] > 1e-14).collect();
        let sqrt_rho = Array2::from_shape_fn((self.dim(), keep.len()), |(i, c)| v[[i, keep[c]]] * w[keep[c]].sqrt());
        let labels: Vec<EventLabel> = self.projectors.keys().copied().filter(|&l| self.rank(l) > 0).collect();
        let gaps: Vec<usize> = (0..slots.len()).filter(|&k| slots[k] == Slot::Unmeasured).collect();
        let count = labels.len().pow(gaps.len() as u32);
        let branches: Vec<Array2<c64>> = (0..count)
            .map(|mut code| {
                let mut filled = slots.to_vec();
                for &g in &gaps {
                    filled[g] = Slot::Measured(labels[code % labels.len()]);
                    code /= labels.len();
                }
                let mut r = sqrt_rho.clone();
                for (k, s) in filled.iter().enumerate() {
                    if k > 0 {
                        r = u.dot(&r);
                    }
                    if let Slot::Measured(l) = s {
                        r = self.projectors[l].dot(&r);
                    }
                }
                r
            })
            .collect();
        let mut total = 0.0;
        for (i, ri) in branches.iter().enumerate() {
            for (j, rj) in branches.iter().enumerate() {
                if i != j {
                    total += ri.iter().zip(rj.iter()).map(|(a, b)| (a * b.conj()).re).sum::<f64>();
                }
            }
        }
        total
    }
}

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use spinhist::cli::{LadderSystem, Propagation};
use spinhist::histories::{
    decoherence_offdiagonal, history_probability, sum_over_gaps, HistorySpec, InitialState,
};
use spinhist::spectral::propagator;
use spinhist::spin_model::ModelParams;

/// Engine (dense route) and oracle for the same ladder pair.
pub struct Pair {
    pub system: LadderSystem,
    pub oracle: Oracle,
}

impl Pair {
    pub fn new(rungs: usize, beta: f64) -> Self {
        let params = ModelParams { n: rungs, beta, ..Default::default() };
        let system = LadderSystem::build(&params, Propagation::Dense).unwrap();
        let oracle = Oracle::new(rungs, params.delta, beta, params.window());
        Self { system, oracle }
    }

    fn populated(&self) -> Vec<EventLabel> {
        let ev = &self.system.events;
        ev.labels.iter().zip(&ev.projectors).filter(|(_, p)| p.rank > 0).map(|(l, _)| *l).collect()
    }

    /// A random spec; `force_gap` guarantees an unmeasured interior slot.
    pub fn random_spec(&self, rng: &mut StdRng, force_gap: bool) -> HistorySpec {
        let populated = self.populated();
        let all = &self.system.events.labels;
        let len = rng.random_range(if force_gap { 3 } else { 2 }..=5usize);
        let mut slots = vec![Slot::Measured(populated[rng.random_range(0..populated.len())])];
        for k in 1..len {
            let interior = k + 1 < len;
            if interior && rng.random_bool(0.35) {
                slots.push(Slot::Unmeasured);
            } else {
                slots.push(Slot::Measured(all[rng.random_range(0..all.len())]));
            }
        }
        if force_gap && !slots.contains(&Slot::Unmeasured) {
            let k = rng.random_range(1..len - 1);
            slots[k] = Slot::Unmeasured;
        }
        let tau = rng.random_range(0.2..12.0);
        let init = if rng.random_bool(0.5) {
            InitialState::single(slots[0].label().unwrap())
        } else {
            let weights: Vec<(EventLabel, f64)> =
                populated.iter().map(|&l| (l, rng.random_range(0.1..1.0))).collect();
            let total: f64 = weights.iter().map(|w| w.1).sum();
            InitialState::from_populations(weights.into_iter().map(|(l, w)| (l, w / total)))
        };
        HistorySpec::new(slots, tau, init)
    }

    pub fn oracle_state(&self, init: &InitialState) -> Array2<c64> {
        let pops: Vec<(EventLabel, f64)> = init.populations.iter().map(|(l, p)| (*l, *p)).collect();
        self.oracle.state(&pops)
    }
}

/// Largest engine-vs-oracle history probability error over `count` random
/// specs, and the largest violation of `P(gap) = sum + off-diagonal` over
/// `count` random gapped specs.
pub fn structural_errors(pair: &Pair, count: usize, seed: u64) -> (f64, f64) {
    let mut rng = StdRng::seed_from_u64(seed);
    let spectrum = pair.system.spectrum.as_ref().unwrap();
    let events = &pair.system.events;
    let mut prob_err: f64 = 0.0;
    for _ in 0..count {
        let spec = pair.random_spec(&mut rng, false);
        let u = propagator(spectrum, spec.tau).unwrap();
        let engine = history_probability(&spec, &u, events).unwrap().raw_probability;
        let exact = pair.oracle.history_probability(&spec.slots, spec.tau, &pair.oracle_state(&spec.initial_state));
        prob_err = prob_err.max((engine - exact).abs());
    }
    let mut identity_err: f64 = 0.0;
    for _ in 0..count {
        let spec = pair.random_spec(&mut rng, true);
        let u = propagator(spectrum, spec.tau).unwrap();
        let rho = pair.oracle_state(&spec.initial_state);
        let gap = history_probability(&spec, &u, events).unwrap().raw_probability;
        let summed = sum_over_gaps(&spec, &u, events).unwrap();
        let off = pair.oracle.offdiagonal_functional(&spec.slots, spec.tau, &rho);
        identity_err = identity_err.max((gap - summed - off).abs());
        if spec.slots.len() == 3 {
            let (x1, x3) = (spec.slots[0].label().unwrap(), spec.slots[2].label().unwrap());
            let engine_off = decoherence_offdiagonal(x1, x3, events, &u, &spec.initial_state).unwrap();
            identity_err = identity_err.max((engine_off.re - off).abs()).max(engine_off.im.abs());
        }
    }
    (prob_err, identity_err)
}
