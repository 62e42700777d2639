//! The classical side: transition matrices, Markov-chain propagation,
//! relaxation curves and master-equation fits, trajectory sampling, and the
//! many-step Markovianity analysis.

use std::io::Write;

use ndarray::{Array1, Array2, Axis};
use ndarray_linalg::{Eig, Inverse, Solve, SVD};
use serde::Serialize;

use crate::c64;
use crate::error::{Error, Result};
use crate::histories::{adjoint, EventLabel, HistorySpec, InitialState, ProjectorSet, Slot, TransferBlocks, PROBABILITY_FLOOR};
use crate::rng::CounterRng;
use crate::spectral::{Propagate, Propagator, Spectrum};

/// `omega[(a, b)] = w(labels[b] | labels[a])`; rows of rank-0 labels are
/// undefined and left at zero.
#[derive(Clone, Debug)]
pub struct TransitionMatrix {
    pub labels: Vec<EventLabel>,
    pub omega: Array2<f64>,
    pub defined: Vec<bool>,
    pub tau: f64,
}

impl TransitionMatrix {
    pub fn identity(labels: Vec<EventLabel>) -> Self {
        let n = labels.len();
        Self { labels, omega: Array2::eye(n), defined: vec![true; n], tau: 0.0 }
    }

    /// From an explicit matrix; rows must be stochastic.
    pub fn from_rows(labels: Vec<EventLabel>, omega: Array2<f64>, tau: f64) -> Result<Self> {
        let n = labels.len();
        if omega.dim() != (n, n) {
            return Err(Error::DimensionMismatch { expected: n, got: omega.nrows() });
        }
        let tm = Self { labels, omega, defined: vec![true; n], tau };
        let err = tm.row_sum_error();
        if err > 1e-10 || tm.omega.iter().any(|&w| w < -1e-12) {
            return Err(Error::InvalidInput(format!("rows are not stochastic (error {err:e})")));
        }
        Ok(tm)
    }

    /// `w(b|a) = ||B_b^H U B_a||^2 / r_a` from precomputed blocks.
    pub fn from_blocks(tb: &TransferBlocks) -> Result<Self> {
        let n = tb.labels.len();
        let mut omega = Array2::zeros((n, n));
        let mut defined = vec![false; n];
        for (a, &la) in tb.labels.iter().enumerate() {
            let ra = tb.rank(la)?;
            if ra == 0 {
                continue;
            }
            defined[a] = true;
            for (b, &lb) in tb.labels.iter().enumerate() {
                let blk = tb.block(lb, la)?;
                omega[[a, b]] = blk.iter().map(|z| z.norm_sqr()).sum::<f64>() / ra as f64;
            }
        }
        Ok(Self { labels: tb.labels.clone(), omega, defined, tau: tb.tau })
    }

    pub fn index_of(&self, label: EventLabel) -> Result<usize> {
        self.labels.iter().position(|&l| l == label).ok_or(Error::UnknownLabel(label))
    }

    pub fn get(&self, to: EventLabel, from: EventLabel) -> Result<f64> {
        Ok(self.omega[[self.index_of(from)?, self.index_of(to)?]])
    }

    /// Largest `|sum_b w(b|a) - 1|` over defined rows.
    pub fn row_sum_error(&self) -> f64 {
        self.omega
            .axis_iter(Axis(0))
            .zip(&self.defined)
            .filter(|(_, &d)| d)
            .map(|(row, _)| (row.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Largest `|w(b|a) - w(-b|-a)|` over pairs of `X` labels.
    pub fn sign_flip_error(&self) -> f64 {
        let mut err: f64 = 0.0;
        for (a, la) in self.labels.iter().enumerate() {
            for (b, lb) in self.labels.iter().enumerate() {
                if let (EventLabel::X(xa), EventLabel::X(xb)) = (la, lb) {
                    if let (Ok(fa), Ok(fb)) = (self.index_of(EventLabel::X(-xa)), self.index_of(EventLabel::X(-xb))) {
                        err = err.max((self.omega[[a, b]] - self.omega[[fa, fb]]).abs());
                    }
                }
            }
        }
        err
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let head: Vec<String> = self.labels.iter().map(|l| l.to_string()).collect();
        writeln!(w, "from,{}", head.join(","))?;
        for (a, l) in self.labels.iter().enumerate() {
            let row: Vec<String> = self.omega.row(a).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{l},{}", row.join(","))?;
        }
        Ok(())
    }
}

/// `w(x'|x) = tr{pi_x' U pi_x U^H} / tr{pi_x}` by propagating each factor.
pub fn transition_matrix<P: Propagate + ?Sized>(events: &ProjectorSet, u: &P) -> Result<TransitionMatrix> {
    let n = events.len();
    let mut omega = Array2::zeros((n, n));
    let mut defined = vec![false; n];
    for (a, p) in events.projectors.iter().enumerate() {
        if p.rank == 0 || !p.is_explicit() {
            continue;
        }
        defined[a] = true;
        let y = u.forward(p.factor()?.view())?;
        for (b, &lb) in events.labels.iter().enumerate() {
            omega[[a, b]] = events.projected_norm_sq(lb, y.view())? / p.rank as f64;
        }
    }
    Ok(TransitionMatrix { labels: events.labels.clone(), omega, defined, tau: u.tau() })
}

/// `P_{n+1}(x') = sum_x w(x'|x) P_n(x)` for `steps` steps; element 0 is `p0`.
pub fn chain_propagate(tm: &TransitionMatrix, p0: &[f64], steps: usize) -> Result<Vec<Vec<f64>>> {
    let n = tm.labels.len();
    if p0.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: p0.len() });
    }
    let total: f64 = p0.iter().sum();
    if (total - 1.0).abs() > 1e-10 || p0.iter().any(|&p| p < 0.0) {
        return Err(Error::InvalidInput(format!("initial distribution sums to {total}")));
    }
    let mut out = vec![p0.to_vec()];
    for _ in 0..steps {
        let cur = out.last().unwrap();
        let mut next = vec![0.0; n];
        for a in 0..n {
            if cur[a] == 0.0 {
                continue;
            }
            if !tm.defined[a] {
                return Err(Error::InvalidInput(format!("probability on undefined row {}", tm.labels[a])));
            }
            for b in 0..n {
                next[b] += tm.omega[[a, b]] * cur[a];
            }
        }
        out.push(next);
    }
    Ok(out)
}

/// What happens to the state after each projective measurement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ResetPolicy {
    /// Replace the post-measurement state by `sum_x P(x) pi_x / tr(pi_x)`,
    /// the maximum-entropy state with the measured populations.
    MaxEntropy,
    /// Keep the Lueders state `sum_x pi_x rho pi_x`.
    Lueders,
}

/// Label populations under "evolve for `tau`, measure" repeated `steps`
/// times, starting from `rho = sum_i p0_i pi_i / tr(pi_i)`; by explicit
/// density-matrix evolution.
pub fn measured_populations(
    events: &ProjectorSet,
    u: &Propagator,
    p0: &[f64],
    steps: usize,
    policy: ResetPolicy,
) -> Result<Vec<Vec<f64>>> {
    let n = events.len();
    if p0.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: p0.len() });
    }
    let q = events.full_factor()?;
    // U in event coordinates; projectors become coordinate masks
    let w = adjoint(&q).dot(&u.matrix).dot(&q);
    let wd = adjoint(&w);
    let mut offsets = vec![0usize];
    for p in &events.projectors {
        offsets.push(offsets.last().unwrap() + p.rank);
    }
    let block_of: Vec<usize> = (0..n).flat_map(|a| std::iter::repeat(a).take(offsets[a + 1] - offsets[a])).collect();
    let max_entropy = |pops: &[f64]| -> Array2<c64> {
        let mut rho = Array2::zeros((events.dim, events.dim));
        for (i, &a) in block_of.iter().enumerate() {
            let r = (offsets[a + 1] - offsets[a]) as f64;
            rho[[i, i]] = c64::new(pops[a] / r, 0.0);
        }
        rho
    };
    for (a, &p) in p0.iter().enumerate() {
        if p > 0.0 && events.projectors[a].rank == 0 {
            return Err(Error::InvalidInput(format!("population on rank-0 label {}", events.labels[a])));
        }
    }
    let mut rho = max_entropy(p0);
    let mut out = vec![p0.to_vec()];
    for _ in 0..steps {
        rho = w.dot(&rho).dot(&wd);
        for ((i, j), z) in rho.indexed_iter_mut() {
            if block_of[i] != block_of[j] {
                *z = c64::new(0.0, 0.0);
            }
        }
        let mut pops = vec![0.0; n];
        for (i, &a) in block_of.iter().enumerate() {
            pops[a] += rho[[i, i]].re;
        }
        if policy == ResetPolicy::MaxEntropy {
            rho = max_entropy(&pops);
        }
        out.push(pops);
    }
    Ok(out)
}

/// Label populations `P(x, t)` under unmeasured evolution, plus leakage into
/// the complement.
#[derive(Clone, Debug, Serialize)]
pub struct RelaxationTable {
    pub times: Vec<f64>,
    /// `X` labels in ascending order.
    pub labels: Vec<EventLabel>,
    /// `populations[t][k]` for `labels[k]`.
    pub populations: Vec<Vec<f64>>,
    pub leakage: Vec<f64>,
}

impl RelaxationTable {
    /// Largest `|sum_x P(x, t) + leakage(t) - 1|`.
    pub fn completeness_error(&self) -> f64 {
        self.populations
            .iter()
            .zip(&self.leakage)
            .map(|(p, l)| (p.iter().sum::<f64>() + l - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_leakage(&self) -> f64 {
        self.leakage.iter().copied().fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let head: Vec<String> = self.labels.iter().map(|l| format!("P({l})")).collect();
        writeln!(w, "t,{},leakage", head.join(","))?;
        for (i, t) in self.times.iter().enumerate() {
            let row: Vec<String> = self.populations[i].iter().map(|v| v.to_string()).collect();
            writeln!(w, "{t},{},{}", row.join(","), self.leakage[i])?;
        }
        Ok(())
    }

    /// First grid time at which every population is within `tol` of its mean
    /// over the second half of the grid.
    pub fn empirical_relaxation_time(&self, tol: f64) -> Option<f64> {
        let n = self.times.len();
        if n < 2 {
            return None;
        }
        let tail = &self.populations[n / 2..];
        let means: Vec<f64> = (0..self.labels.len())
            .map(|k| tail.iter().map(|p| p[k]).sum::<f64>() / tail.len() as f64)
            .collect();
        (0..n)
            .find(|&i| self.populations[i].iter().zip(&means).all(|(p, m)| (p - m).abs() < tol))
            .map(|i| self.times[i])
    }
}

/// Unitary evolution of `init` with the eigensystem `spectrum` of the full
/// Hamiltonian, sampled on `t_grid`.
pub fn relaxation_curves(
    spectrum: &Spectrum,
    events: &ProjectorSet,
    init: &InitialState,
    t_grid: &[f64],
) -> Result<RelaxationTable> {
    if t_grid.windows(2).any(|w| w[1] < w[0]) || t_grid.first().is_some_and(|&t| t < 0.0) {
        return Err(Error::InvalidInput("time grid must be ascending from 0".into()));
    }
    init.validate(events)?;
    let q = events.full_factor()?;
    let v = &spectrum.eigenvectors;
    let qv = adjoint(&q).dot(v);
    let c = adjoint(v).dot(&init.branches(events, None)?);
    let mut offsets = vec![0usize];
    for p in &events.projectors {
        offsets.push(offsets.last().unwrap() + p.rank);
    }
    let x_idx: Vec<usize> = (0..events.len()).filter(|&a| events.labels[a] != EventLabel::Complement).collect();
    let comp = events.index_of(EventLabel::Complement).ok();
    let mut populations = Vec::with_capacity(t_grid.len());
    let mut leakage = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let mut ct = c.clone();
        for (mut row, &lam) in ct.axis_iter_mut(Axis(0)).zip(&spectrum.eigenvalues) {
            let ph = c64::from_polar(1.0, -lam * t);
            row.mapv_inplace(|z| z * ph);
        }
        let y = qv.dot(&ct);
        let block = |a: usize| -> f64 {
            y.slice(ndarray::s![offsets[a]..offsets[a + 1], ..]).iter().map(|z| z.norm_sqr()).sum()
        };
        populations.push(x_idx.iter().map(|&a| block(a)).collect());
        leakage.push(comp.map(block).unwrap_or(0.0));
    }
    Ok(RelaxationTable {
        times: t_grid.to_vec(),
        labels: x_idx.iter().map(|&a| events.labels[a]).collect(),
        populations,
        leakage,
    })
}

/// Fitted nearest-neighbour master equation `dP/dt = A P`.
#[derive(Clone, Debug, Serialize)]
pub struct RateFit {
    /// Labels taking part in the fit (those ever populated), ascending.
    pub labels: Vec<EventLabel>,
    /// `rates_up[k]`: rate `labels[k] -> labels[k+1]`.
    pub rates_up: Vec<f64>,
    /// `rates_down[k]`: rate `labels[k+1] -> labels[k]`.
    pub rates_down: Vec<f64>,
    /// Sum of squared deviations over all times and labels.
    pub residual: f64,
    pub max_deviation: f64,
    /// Master-equation solution on the table's grid, same layout as the table.
    pub fitted: Vec<Vec<f64>>,
    pub iterations: usize,
}

impl RateFit {
    pub fn write_csv<W: Write>(&self, table: &RelaxationTable, mut w: W) -> std::io::Result<()> {
        let head: Vec<String> = table.labels.iter().map(|l| format!("M({l})")).collect();
        writeln!(w, "t,{}", head.join(","))?;
        for (i, t) in table.times.iter().enumerate() {
            let row: Vec<String> = self.fitted[i].iter().map(|v| v.to_string()).collect();
            writeln!(w, "{t},{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Generator of the nearest-neighbour chain with the given rates.
pub fn rate_matrix(up: &[f64], down: &[f64]) -> Array2<f64> {
    let n = up.len() + 1;
    let mut a = Array2::zeros((n, n));
    for k in 0..up.len() {
        a[[k + 1, k]] += up[k];
        a[[k, k]] -= up[k];
        a[[k, k + 1]] += down[k];
        a[[k + 1, k + 1]] -= down[k];
    }
    a
}

/// Integrates `dP/dt = A P` with classical RK4, sub-dividing every grid
/// interval into steps no longer than `max_dt`.
pub fn integrate_master(a: &Array2<f64>, p0: &Array1<f64>, times: &[f64], max_dt: f64) -> Vec<Array1<f64>> {
    let mut out = Vec::with_capacity(times.len());
    let mut p = p0.clone();
    let mut t = times.first().copied().unwrap_or(0.0);
    for &target in times {
        let span = target - t;
        if span > 0.0 {
            let steps = (span / max_dt).ceil().max(1.0) as usize;
            let h = span / steps as f64;
            for _ in 0..steps {
                let k1 = a.dot(&p);
                let k2 = a.dot(&(&p + &(&k1 * (h / 2.0))));
                let k3 = a.dot(&(&p + &(&k2 * (h / 2.0))));
                let k4 = a.dot(&(&p + &(&k3 * h)));
                p = &p + &((&k1 + &(&k2 * 2.0) + &(&k3 * 2.0) + &k4) * (h / 6.0));
            }
        }
        t = target;
        out.push(p.clone());
    }
    out
}

/// Least-squares fit of time-independent nearest-neighbour rates to the
/// quantum curves (Levenberg-Marquardt on log-rates, RK4 at
/// `dt = tau_r / 2000`).
pub fn fit_rate_equation(table: &RelaxationTable, tau_r: f64) -> Result<RateFit> {
    let nt = table.times.len();
    if nt < 2 {
        return Err(Error::DegenerateFit("need at least two time points".into()));
    }
    let active: Vec<usize> = (0..table.labels.len())
        .filter(|&k| table.populations.iter().any(|p| p[k] > 1e-14))
        .collect();
    let variation = table
        .populations
        .iter()
        .flat_map(|p| active.iter().map(move |&k| (p[k] - table.populations[0][k]).abs()))
        .fold(0.0, f64::max);
    if active.len() < 2 || variation < 1e-9 {
        return Err(Error::DegenerateFit(format!(
            "populations do not relax (max change {variation:e}); rates are unidentifiable"
        )));
    }
    let m = active.len();
    let np = 2 * (m - 1);
    let max_dt = tau_r / 2000.0;
    let p0: Array1<f64> = active.iter().map(|&k| table.populations[0][k]).collect();
    let target: Vec<f64> = table.populations.iter().flat_map(|p| active.iter().map(move |&k| p[k])).collect();

    let simulate = |theta: &[f64]| -> Vec<Array1<f64>> {
        let rates: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
        let a = rate_matrix(&rates[..m - 1], &rates[m - 1..]);
        integrate_master(&a, &p0, &table.times, max_dt)
    };
    let residuals = |theta: &[f64]| -> Vec<f64> {
        simulate(theta)
            .iter()
            .flat_map(|p| p.iter().copied().collect::<Vec<_>>())
            .zip(&target)
            .map(|(a, b)| a - b)
            .collect()
    };
    let cost = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>();

    let t_max = table.times[nt - 1].max(f64::MIN_POSITIVE);
    let mut theta = vec![(2.0 / t_max).ln(); np];
    let mut r = residuals(&theta);
    let mut c = cost(&r);
    let mut mu = 1e-3;
    let mut iterations = 0;
    for _ in 0..500 {
        iterations += 1;
        let h = 1e-6;
        let mut jac = Array2::<f64>::zeros((r.len(), np));
        for j in 0..np {
            let mut tp = theta.clone();
            tp[j] += h;
            let rp = residuals(&tp);
            for (i, (a, b)) in rp.iter().zip(&r).enumerate() {
                jac[[i, j]] = (a - b) / h;
            }
        }
        let jt = jac.t();
        let jtj = jt.dot(&jac);
        let g = jt.dot(&Array1::from(r.clone()));
        if jtj.diag().iter().all(|&d| d < 1e-300) {
            return Err(Error::DegenerateFit("Jacobian vanishes".into()));
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut lhs = jtj.clone();
            for j in 0..np {
                lhs[[j, j]] += mu * jtj[[j, j]].max(1e-12);
            }
            let step = lhs.solve(&(-&g))?;
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, b)| a + b.clamp(-5.0, 5.0)).collect();
            let rt = residuals(&trial);
            let ct = cost(&rt);
            if ct < c {
                let rel = (c - ct) / c.max(f64::MIN_POSITIVE);
                theta = trial;
                r = rt;
                c = ct;
                mu = (mu / 3.0).max(1e-12);
                improved = rel > 1e-12;
                break;
            }
            mu *= 4.0;
        }
        if !improved || c < 1e-24 {
            break;
        }
    }
    let rates: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
    let sol = simulate(&theta);
    let mut fitted = vec![vec![0.0; table.labels.len()]; nt];
    let mut max_deviation: f64 = 0.0;
    for (i, p) in sol.iter().enumerate() {
        for (j, &k) in active.iter().enumerate() {
            fitted[i][k] = p[j];
            max_deviation = max_deviation.max((p[j] - table.populations[i][k]).abs());
        }
    }
    Ok(RateFit {
        labels: active.iter().map(|&k| table.labels[k]).collect(),
        rates_up: rates[..m - 1].to_vec(),
        rates_down: rates[m - 1..].to_vec(),
        residual: c,
        max_deviation,
        fitted,
        iterations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    pub outcomes: Vec<EventLabel>,
    pub seed: u64,
    pub tau: f64,
}

/// Samples `length` outcomes starting with `x0`, each drawn from the row of
/// the previous outcome.
pub fn sample_trajectory(tm: &TransitionMatrix, x0: EventLabel, length: usize, seed: u64) -> Result<Trajectory> {
    let mut cur = tm.index_of(x0)?;
    let mut rng = CounterRng::new(seed);
    let mut outcomes = Vec::with_capacity(length);
    if length > 0 {
        outcomes.push(x0);
    }
    for _ in 1..length {
        if !tm.defined[cur] {
            return Err(Error::InvalidInput(format!("row {} is undefined", tm.labels[cur])));
        }
        let u = rng.next_f64();
        let row = tm.omega.row(cur);
        let total: f64 = row.iter().map(|w| w.max(0.0)).sum();
        let mut acc = 0.0;
        let mut next = row.len() - 1;
        for (b, &w) in row.iter().enumerate() {
            acc += w.max(0.0) / total;
            if u < acc {
                next = b;
                break;
            }
        }
        // roundoff can leave u above the final partial sum
        while row[next] <= 0.0 && next > 0 {
            next -= 1;
        }
        cur = next;
        outcomes.push(tm.labels[cur]);
    }
    Ok(Trajectory { outcomes, seed, tau: tm.tau })
}

/// `w_lambda` and `Mbar_lambda` for the end of one history.
#[derive(Clone, Debug, Serialize)]
pub struct ManyStepReport {
    pub history: Vec<EventLabel>,
    /// `lambda = 1..=lambda_max` (index of `mbar_lambda`).
    pub lambda_values: Vec<usize>,
    /// `omega_lambda[k]` is `w_{k+1}`, for `k + 1 = 1..=lambda_max + 1`.
    pub omega_lambda: Vec<f64>,
    /// `|1 - w_{lambda+1} / w_lambda|`.
    pub mbar_lambda: Vec<f64>,
    pub uniform: bool,
    /// For uniform histories: whether `w_lambda` is non-decreasing within 1e-10.
    pub monotone: Option<bool>,
    pub truncated: Option<String>,
}

impl ManyStepReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "lambda,omega_lambda,mbar_lambda")?;
        for (k, om) in self.omega_lambda.iter().enumerate() {
            match self.mbar_lambda.get(k) {
                Some(m) => writeln!(w, "{},{om},{m}", k + 1)?,
                None => writeln!(w, "{},{om},", k + 1)?,
            }
        }
        Ok(())
    }
}

/// `w_lambda = P(h_{L-1-lambda} .. h_{L-1}) / P(h_{L-1-lambda} .. h_{L-2})`
/// with `rho` proportional to the projector of the first label, and
/// `Mbar_lambda = |1 - w_{lambda+1} / w_lambda|`.
pub fn manystep_analysis(history: &[EventLabel], tb: &TransferBlocks, lambda_max: usize) -> Result<ManyStepReport> {
    let len = history.len();
    if lambda_max == 0 || len < lambda_max + 2 {
        return Err(Error::InvalidInput(format!(
            "history of length {len} is too short for lambda_max = {lambda_max}"
        )));
    }
    let uniform = history.iter().all(|&l| l == history[0]);
    let mut omega = Vec::new();
    let mut truncated = None;
    for lambda in 1..=lambda_max + 1 {
        let start = len - 1 - lambda;
        let slots: Vec<Slot> = history[start..].iter().map(|&l| Slot::Measured(l)).collect();
        let spec = HistorySpec::from_first_label(slots, tb.tau)?;
        let den = tb.history_probability(&spec.without_last())?;
        if den <= PROBABILITY_FLOOR {
            truncated = Some(format!("prefix probability {den:e} below floor at lambda = {lambda}"));
            break;
        }
        let num = tb.history_probability(&spec)?;
        omega.push((num / den).clamp(0.0, 1.0));
    }
    let mut mbar = Vec::new();
    for k in 0..omega.len().saturating_sub(1) {
        if omega[k] <= PROBABILITY_FLOOR {
            truncated.get_or_insert_with(|| format!("w_{} below floor", k + 1));
            break;
        }
        mbar.push((1.0 - omega[k + 1] / omega[k]).abs());
    }
    let monotone = uniform.then(|| omega.windows(2).all(|w| w[1] >= w[0] - 1e-10));
    Ok(ManyStepReport {
        history: history.to_vec(),
        lambda_values: (1..=mbar.len()).collect(),
        omega_lambda: omega,
        mbar_lambda: mbar,
        uniform,
        monotone,
        truncated,
    })
}

/// A uniformly random history of `length` labels drawn from `labels`.
pub fn random_history(labels: &[EventLabel], length: usize, seed: u64) -> Vec<EventLabel> {
    let mut rng = CounterRng::new(seed);
    (0..length).map(|_| labels[(rng.next_f64() * labels.len() as f64) as usize % labels.len()]).collect()
}

/// Eigen-decomposition of a general complex matrix, or its Schur form when
/// the eigenvector matrix is too ill-conditioned to be trusted.
#[derive(Clone, Debug)]
pub struct GeneralEigensystem {
    pub eigenvalues: Vec<c64>,
    /// Right eigenvectors (columns); `None` after a Schur fallback.
    pub eigenvectors: Option<Array2<c64>>,
    /// `(T, Z)` with `M = Z T Z^H`, `T` upper triangular.
    pub schur: Option<(Array2<c64>, Array2<c64>)>,
    /// Condition number of the eigenvector matrix.
    pub condition: f64,
    /// `max |M V - V Phi|` (or `|M Z - Z T|`) relative to `max(1, max|M|)`.
    pub residual: f64,
    pub warning: Option<String>,
}

/// Eigenvector matrices with a condition number above this trigger the Schur
/// fallback.
pub const DEFECTIVE_CONDITION: f64 = 1e10;

pub fn general_eigensystem(m: &Array2<c64>) -> Result<GeneralEigensystem> {
    let scale = m.iter().map(|z| z.norm()).fold(1.0, f64::max);
    let (w, v) = m.eig()?;
    let sv = v.svd(false, false)?.1;
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if condition <= DEFECTIVE_CONDITION {
        let mut vphi = v.clone();
        for (mut col, &l) in vphi.axis_iter_mut(Axis(1)).zip(w.iter()) {
            col.mapv_inplace(|z| z * l);
        }
        let residual = max_abs(&(m.dot(&v) - vphi)) / scale;
        return Ok(GeneralEigensystem {
            eigenvalues: w.to_vec(),
            eigenvectors: Some(v),
            schur: None,
            condition,
            residual,
            warning: None,
        });
    }
    let (t, z) = schur(m)?;
    let residual = max_abs(&(m.dot(&z) - z.dot(&t))) / scale;
    Ok(GeneralEigensystem {
        eigenvalues: t.diag().to_vec(),
        eigenvectors: None,
        schur: Some((t, z)),
        condition,
        residual,
        warning: Some(format!(
            "eigenvector matrix has condition number {condition:e}; matrix treated as defective, Schur form used"
        )),
    })
}

fn max_abs(m: &Array2<c64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Complex Schur decomposition `M = Z T Z^H`.
pub fn schur(m: &Array2<c64>) -> Result<(Array2<c64>, Array2<c64>)> {
    use lapack_sys::__BindgenComplex as Zc;
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: m.ncols() });
    }
    // column-major copy
    let mut a: Vec<c64> = m.t().iter().copied().collect();
    let mut w = vec![c64::new(0.0, 0.0); n];
    let mut vs = vec![c64::new(0.0, 0.0); n * n];
    let mut rwork = vec![0.0f64; n.max(1)];
    let mut bwork = vec![0i32; n.max(1)];
    let nn = n as i32;
    let mut sdim = 0i32;
    let mut info = 0i32;
    let jobvs = b'V' as std::os::raw::c_char;
    let sort = b'N' as std::os::raw::c_char;
    let mut query = c64::new(0.0, 0.0);
    // SAFETY: c64 is a repr(C) pair of f64, layout-identical to Zc; all
    // buffers have the sizes LAPACK requires for n x n input.
    unsafe {
        lapack_sys::zgees_(
            &jobvs, &sort, None, &nn,
            a.as_mut_ptr() as *mut Zc<f64>, &nn, &mut sdim,
            w.as_mut_ptr() as *mut Zc<f64>, vs.as_mut_ptr() as *mut Zc<f64>, &nn,
            &mut query as *mut c64 as *mut Zc<f64>, &-1, rwork.as_mut_ptr(), bwork.as_mut_ptr(), &mut info,
        );
    }
    let lwork = (query.re as usize).max(2 * n).max(1);
    let mut work = vec![c64::new(0.0, 0.0); lwork];
    let lw = lwork as i32;
    unsafe {
        lapack_sys::zgees_(
            &jobvs, &sort, None, &nn,
            a.as_mut_ptr() as *mut Zc<f64>, &nn, &mut sdim,
            w.as_mut_ptr() as *mut Zc<f64>, vs.as_mut_ptr() as *mut Zc<f64>, &nn,
            work.as_mut_ptr() as *mut Zc<f64>, &lw, rwork.as_mut_ptr(), bwork.as_mut_ptr(), &mut info,
        );
    }
    if info != 0 {
        return Err(Error::InvalidInput(format!("Schur decomposition failed (info = {info})")));
    }
    let from_cm = |buf: Vec<c64>| Array2::from_shape_vec((n, n), buf).expect("n*n").reversed_axes();
    let mut t = from_cm(a);
    for i in 0..n {
        for j in 0..i {
            t[[i, j]] = c64::new(0.0, 0.0);
        }
    }
    Ok((t, from_cm(vs)))
}

/// Eigensystem of the non-Hermitian `U^H pi`.
pub fn eigensystem_uniform(pi: &crate::operator::LinearOperator, u: &Propagator) -> Result<GeneralEigensystem> {
    let threshold = crate::spectral::dense_threshold();
    if u.dim() > threshold {
        return Err(Error::DenseThresholdExceeded { dim: u.dim(), threshold });
    }
    if pi.dim() != u.dim() {
        return Err(Error::DimensionMismatch { expected: u.dim(), got: pi.dim() });
    }
    // U^H pi = (pi U)^H for Hermitian pi
    let m = adjoint(&pi.apply_block(u.matrix.view()));
    general_eigensystem(&m)
}

/// `P_k = P(x, x, ..., x)` (k slots, `rho = pi_x / r`) for `k = 1..=max_slots`
/// from the eigensystem of the compression `B^H U^H B` of `U^H pi` to the
/// range of `pi`:
/// `P_k = (1/r) sum_ij G_ij K_ji conj(phi_i)^(k-1) phi_j^(k-1)` with
/// `G = V^H V` and `K = V^-1 V^-H`.
pub fn uniform_probabilities_eigenform(
    tb: &TransferBlocks,
    label: EventLabel,
    max_slots: usize,
) -> Result<(Vec<f64>, GeneralEigensystem)> {
    let a = tb.block(label, label)?.to_owned();
    let r = a.nrows();
    if r == 0 {
        return Err(Error::InvalidInput(format!("label {label} has rank 0")));
    }
    let es = general_eigensystem(&adjoint(&a))?;
    let mut probs = Vec::with_capacity(max_slots);
    match (&es.eigenvectors, &es.schur) {
        (Some(v), _) => {
            let g = adjoint(v).dot(v);
            let vinv = v.inv()?;
            let k = vinv.dot(&adjoint(&vinv));
            let phi = &es.eigenvalues;
            let mut pow = vec![c64::new(1.0, 0.0); r];
            for _ in 1..=max_slots {
                let mut s = c64::new(0.0, 0.0);
                for i in 0..r {
                    for j in 0..r {
                        s += g[[i, j]] * k[[j, i]] * pow[i].conj() * pow[j];
                    }
                }
                probs.push(s.re / r as f64);
                for (p, f) in pow.iter_mut().zip(phi) {
                    *p *= f;
                }
            }
        }
        (None, Some((t, _))) => {
            let mut pow = Array2::<c64>::eye(r);
            for _ in 1..=max_slots {
                probs.push(pow.iter().map(|z| z.norm_sqr()).sum::<f64>() / r as f64);
                pow = pow.dot(t);
            }
        }
        _ => unreachable!(),
    }
    Ok((probs, es))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{diagonalize, diagonalize_uncoupled, propagator};
    use crate::spin_model::{build_basis, build_hamiltonian, ModelParams};

    fn setup(beta: f64, tau: f64) -> (ProjectorSet, Propagator, Spectrum) {
        let p = ModelParams { n: 2, beta, ..Default::default() };
        let basis = build_basis(8, 0.0).unwrap();
        let bs = diagonalize_uncoupled(&p, &basis).unwrap();
        let events = ProjectorSet::from_energy_window(&bs, p.window()).unwrap();
        let h = build_hamiltonian(&p, &basis, true).unwrap();
        let spec = diagonalize(&h).unwrap();
        let u = propagator(&spec, tau).unwrap();
        (events, u, spec)
    }

    #[test]
    fn transition_routes_agree_and_rows_stochastic() {
        let (events, u, _) = setup(0.5, 2.0);
        let a = transition_matrix(&events, &u).unwrap();
        let b = TransitionMatrix::from_blocks(&TransferBlocks::new(&events, &u).unwrap()).unwrap();
        assert!(a.row_sum_error() < 1e-12);
        assert!((&a.omega - &b.omega).iter().all(|d| d.abs() < 1e-12));
        let id = transition_matrix(&events, &Propagator::identity(70)).unwrap();
        for (i, d) in id.defined.iter().enumerate() {
            if *d {
                assert!((id.omega[[i, i]] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chain_embedding_small() {
        let (events, u, _) = setup(0.5, 2.0);
        let tm = transition_matrix(&events, &u).unwrap();
        let mut p0 = vec![0.0; events.len()];
        p0[events.index_of(EventLabel::X(0)).unwrap()] = 1.0;
        let chain = chain_propagate(&tm, &p0, 5).unwrap();
        let quantum = measured_populations(&events, &u, &p0, 5, ResetPolicy::MaxEntropy).unwrap();
        let lueders = measured_populations(&events, &u, &p0, 5, ResetPolicy::Lueders).unwrap();
        for (c, q) in chain.iter().zip(&quantum) {
            for (a, b) in c.iter().zip(q) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for (a, b) in chain[1].iter().zip(&lueders[1]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn master_round_trip() {
        let labels: Vec<EventLabel> = [-2, 0, 2].iter().map(|&x| EventLabel::X(x)).collect();
        let up = [0.11, 0.05];
        let down = [0.04, 0.09];
        let a = rate_matrix(&up, &down);
        let times: Vec<f64> = (0..=40).map(|i| i as f64).collect();
        let sol = integrate_master(&a, &Array1::from(vec![0.0, 1.0, 0.0]), &times, 0.005);
        let table = RelaxationTable {
            times,
            labels,
            populations: sol.iter().map(|p| p.to_vec()).collect(),
            leakage: vec![0.0; 41],
        };
        let fit = fit_rate_equation(&table, 20.0).unwrap();
        for (f, t) in fit.rates_up.iter().chain(&fit.rates_down).zip(up.iter().chain(&down)) {
            assert!((f / t - 1.0).abs() < 0.01, "{f} vs {t}");
        }
        assert!(fit.residual < 1e-8);
    }

    #[test]
    fn flat_curves_are_degenerate() {
        let table = RelaxationTable {
            times: vec![0.0, 1.0, 2.0],
            labels: vec![EventLabel::X(0), EventLabel::X(2)],
            populations: vec![vec![1.0, 0.0]; 3],
            leakage: vec![0.0; 3],
        };
        assert!(matches!(fit_rate_equation(&table, 20.0), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn identity_chain_trajectory_is_constant() {
        let labels = vec![EventLabel::X(0), EventLabel::X(2)];
        let tm = TransitionMatrix::identity(labels);
        let t = sample_trajectory(&tm, EventLabel::X(2), 50, 9).unwrap();
        assert!(t.outcomes.iter().all(|&l| l == EventLabel::X(2)));
        assert_eq!(t.outcomes.len(), 50);
    }

    #[test]
    fn eigenform_matches_history_probabilities() {
        let (events, u, _) = setup(0.5, 5.0);
        let tb = TransferBlocks::new(&events, &u).unwrap();
        let (probs, es) = uniform_probabilities_eigenform(&tb, EventLabel::X(0), 12).unwrap();
        assert!(es.eigenvalues.iter().all(|z| z.norm() <= 1.0 + 1e-10));
        for (k, p) in probs.iter().enumerate() {
            let spec = HistorySpec::from_first_label(vec![Slot::x(0); k + 1], 5.0).unwrap();
            let direct = tb.history_probability(&spec).unwrap();
            assert!((p - direct).abs() < 1e-10, "k={k}: {p} vs {direct}");
        }
    }

    #[test]
    fn schur_reconstructs() {
        // nilpotent Jordan block: defective
        let mut m = Array2::<c64>::zeros((3, 3));
        m[[0, 1]] = c64::new(1.0, 0.0);
        m[[1, 2]] = c64::new(1.0, 0.0);
        let es = general_eigensystem(&m).unwrap();
        assert!(es.schur.is_some() && es.warning.is_some());
        assert!(es.residual < 1e-12);
        assert!(es.eigenvalues.iter().all(|z| z.norm() < 1e-5));
    }
}
