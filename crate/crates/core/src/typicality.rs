//! Random-vector estimators of history probabilities and Haar-random
//! unitary experiments.

use std::io::Write;

use ndarray::{Array1, Array2, Axis};
use ndarray_linalg::QR;
use rayon::prelude::*;
use serde::Serialize;

use crate::c64;
use crate::error::{Error, Result};
use crate::histories::{
    adjoint, decoherence_terms, frobenius_sq, history_probability_density, EventLabel, HistorySpec, InitialState,
    ProjectorSet, Slot, PROBABILITY_FLOOR,
};
use crate::operator::LinearOperator;
use crate::rng::CounterRng;
use crate::spectral::{Propagate, Propagator};

/// Estimators refuse to report an error bar below this many samples.
pub const MIN_SAMPLES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EstimateWithError {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
    pub seed: u64,
}

/// Jackknife mean and standard error of `f(mean(a), mean(b))` for paired
/// samples; with `f(a, _) = a` this is the plain standard error of the mean.
pub fn jackknife(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> (f64, f64) {
    let n = a.len();
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    let full = f(sa / n as f64, sb / n as f64);
    if n < 2 {
        return (full, 0.0);
    }
    let m = n as f64 - 1.0;
    let loo: Vec<f64> = (0..n).map(|i| f((sa - a[i]) / m, (sb - b[i]) / m)).collect();
    let mean_loo = loo.iter().sum::<f64>() / n as f64;
    let var = loo.iter().map(|v| (v - mean_loo).powi(2)).sum::<f64>() * m / n as f64;
    (full, var.sqrt())
}

fn unit_gaussian(len: usize, rng: &mut CounterRng) -> Array1<c64> {
    (0..len).map(|_| rng.complex_normal()).collect()
}

/// `pi g / ||pi g||` for a complex Gaussian `g`, drawn from stream 0 of `seed`.
pub fn random_projected_state(pi: &LinearOperator, seed: u64) -> Result<Array1<c64>> {
    let mut rng = CounterRng::new(seed);
    let g = unit_gaussian(pi.dim(), &mut rng);
    let v = pi.apply(g.view());
    let n = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if n < 1e-12 {
        return Err(Error::InvalidInput("projector annihilates the random vector (pi = 0?)".into()));
    }
    Ok(v / c64::new(n, 0.0))
}

/// Columns `B z_s / ||z_s||`, `z_s` complex Gaussian in the range coordinates,
/// one per sample `s` of stream `(seed, s)`.
fn random_states_in_range(events: &ProjectorSet, label: EventLabel, samples: std::ops::Range<usize>, seed: u64) -> Result<Array2<c64>> {
    let p = events.get(label)?;
    if p.rank == 0 {
        return Err(Error::InvalidInput(format!("label {label} has rank 0")));
    }
    let mut z = Array2::zeros((p.rank, samples.len()));
    for (c, s) in samples.enumerate() {
        let mut rng = CounterRng::stream(seed, s as u64);
        let mut col = unit_gaussian(p.rank, &mut rng);
        let n = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        col.mapv_inplace(|v| v / n);
        z.column_mut(c).assign(&col);
    }
    p.embed(z.view())
}

/// Per-sample `||Pi_n U .. Pi_2 U psi_s||^2` for every prefix length; row `k`
/// holds the values after the `k`-th slot (`k = 0` is the first slot).
fn per_sample_prefixes<P: Propagate + ?Sized>(
    spec: &HistorySpec,
    events: &ProjectorSet,
    u: &P,
    samples: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    spec.validate(events)?;
    let first = match (spec.slots.first(), spec.initial_state.populations.len()) {
        (Some(Slot::Measured(l)), 1) if spec.initial_state.populations.get(l) == Some(&1.0) => *l,
        _ => {
            return Err(Error::InvalidInput(
                "typicality estimator needs rho proportional to the first slot's projector".into(),
            ))
        }
    };
    if samples < MIN_SAMPLES {
        return Err(Error::TooFewSamples { required: MIN_SAMPLES, got: samples });
    }
    if spec.slots.len() > 1 && (spec.tau - u.tau()).abs() > 1e-12 * spec.tau.abs().max(1.0) {
        return Err(Error::TauMismatch { spec: spec.tau, propagator: u.tau() });
    }
    let mut out = Array2::zeros((spec.slots.len(), samples));
    // batches keep memory bounded for large dimensions
    let batch = (4_000_000 / events.dim.max(1)).clamp(1, samples);
    let mut start = 0;
    while start < samples {
        let end = (start + batch).min(samples);
        let mut y = random_states_in_range(events, first, start..end, seed)?;
        for c in 0..y.ncols() {
            out[[0, start + c]] = y.column(c).iter().map(|z| z.norm_sqr()).sum::<f64>();
        }
        for (k, slot) in spec.slots.iter().enumerate().skip(1) {
            y = u.forward(y.view())?;
            if let Slot::Measured(l) = slot {
                y = events.project(*l, y.view())?;
            }
            for c in 0..y.ncols() {
                out[[k, start + c]] = y.column(c).iter().map(|z| z.norm_sqr()).sum::<f64>();
            }
        }
        start = end;
    }
    Ok(out)
}

/// Unbiased estimate of `P(spec)` from random states in the range of the
/// first projector.
pub fn estimate_history_probability<P: Propagate + ?Sized>(
    spec: &HistorySpec,
    events: &ProjectorSet,
    u: &P,
    samples: usize,
    seed: u64,
) -> Result<EstimateWithError> {
    let table = per_sample_prefixes(spec, events, u, samples, seed)?;
    let last = table.row(table.nrows() - 1).to_vec();
    let (mean, stderr) = jackknife(&last, &last, |a, _| a);
    Ok(EstimateWithError { mean, stderr, samples, seed })
}

/// Ratio estimate of `P(spec) / P(spec without its last slot)` with a
/// jackknife error bar.
pub fn estimate_conditional_probability<P: Propagate + ?Sized>(
    spec_long: &HistorySpec,
    events: &ProjectorSet,
    u: &P,
    samples: usize,
    seed: u64,
) -> Result<EstimateWithError> {
    if spec_long.slots.len() < 2 {
        return Err(Error::InvalidInput("conditional needs at least two slots".into()));
    }
    let table = per_sample_prefixes(spec_long, events, u, samples, seed)?;
    let n = table.nrows();
    let num = table.row(n - 1).to_vec();
    let den = table.row(n - 2).to_vec();
    let dmean = den.iter().sum::<f64>() / den.len() as f64;
    if dmean <= PROBABILITY_FLOOR {
        return Err(Error::UndefinedConditional { denominator: dmean, floor: PROBABILITY_FLOOR });
    }
    let (mean, stderr) = jackknife(&num, &den, |a, b| a / b);
    Ok(EstimateWithError { mean, stderr, samples, seed })
}

/// Haar-distributed unitary: QR of a complex Ginibre matrix with the phases
/// of `diag(R)` moved into `Q`.
pub fn haar_unitary(dim: usize, seed: u64) -> Result<Array2<c64>> {
    haar_unitary_stream(dim, seed, 0)
}

pub fn haar_unitary_stream(dim: usize, seed: u64, stream: u64) -> Result<Array2<c64>> {
    if dim < 2 {
        return Err(Error::InvalidInput(format!("Haar unitary needs dim >= 2, got {dim}")));
    }
    let mut rng = CounterRng::stream(seed, stream);
    let g = Array2::from_shape_simple_fn((dim, dim), || rng.complex_normal());
    let (mut q, r) = g.qr()?;
    for (mut col, d) in q.axis_iter_mut(Axis(1)).zip(r.diag().iter()) {
        let n = d.norm();
        let phase = if n > 0.0 { d / n } else { c64::new(1.0, 0.0) };
        col.mapv_inplace(|z| z * phase);
    }
    Ok(q)
}

pub fn unitarity_error(u: &Array2<c64>) -> f64 {
    let p = u.dot(&adjoint(u));
    p.indexed_iter()
        .map(|((i, j), z)| (z - if i == j { c64::new(1.0, 0.0) } else { c64::new(0.0, 0.0) }).norm())
        .fold(0.0, f64::max)
}

/// Kolmogorov-Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Mean and standard error of one off-diagonal addend over samples.
#[derive(Clone, Debug, Serialize)]
pub struct TermMean {
    pub i: usize,
    pub j: usize,
    pub mean_re: f64,
    pub mean_im: f64,
    pub stderr_re: f64,
    pub stderr_im: f64,
}

impl TermMean {
    /// Largest `|mean| / stderr` of the two components.
    pub fn z_score(&self) -> f64 {
        let z = |m: f64, s: f64| if s > 0.0 { (m / s).abs() } else if m == 0.0 { 0.0 } else { f64::INFINITY };
        z(self.mean_re, self.stderr_re).max(z(self.mean_im, self.stderr_im))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HaarReport {
    pub dims: Vec<usize>,
    pub parts: usize,
    pub samples: usize,
    pub seed: u64,
    /// RMS of the off-diagonal sum per dimension.
    pub rms_offdiagonal: Vec<f64>,
    pub rms_stderr: Vec<f64>,
    /// Slope of `log(rms)` against `log(d)` (weighted least squares).
    pub fitted_exponent: f64,
    pub exponent_stderr: f64,
    /// 95% normal confidence interval of the exponent.
    pub exponent_ci: [f64; 2],
    pub term_means: Vec<Vec<TermMean>>,
}

impl HaarReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "dim,rms,stderr")?;
        for ((d, r), s) in self.dims.iter().zip(&self.rms_offdiagonal).zip(&self.rms_stderr) {
            writeln!(w, "{d},{r},{s}")?;
        }
        Ok(())
    }
}

/// Weighted least-squares slope of `y` on `x` with per-point variances.
pub fn weighted_slope(x: &[f64], y: &[f64], var: &[f64]) -> (f64, f64) {
    let w: Vec<f64> = var.iter().map(|v| 1.0 / v.max(1e-300)).collect();
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(&w).map(|(a, b)| b * (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).zip(&w).map(|((a, c), b)| b * (a - mx) * (c - my)).sum();
    (sxy / sxx, (1.0 / sxx).sqrt())
}

/// Path `part 0 -> -- -> part 1` through an equal-parts family.
fn haar_path(parts: usize) -> (EventLabel, EventLabel) {
    (EventLabel::X(0), EventLabel::X((1 % parts) as i32))
}

/// Samples Haar unitaries per dimension and records the off-diagonal
/// decoherence sum for `part 0 -> -- -> part 1` with `rho = pi_0 / tr`.
pub fn haar_consistency_experiment(dims: &[usize], parts: usize, samples: usize, seed: u64) -> Result<HaarReport> {
    if samples < MIN_SAMPLES {
        return Err(Error::TooFewSamples { required: MIN_SAMPLES, got: samples });
    }
    let (x1, x3) = haar_path(parts);
    let mut rms = Vec::new();
    let mut rms_se = Vec::new();
    let mut term_means = Vec::new();
    for (di, &d) in dims.iter().enumerate() {
        if parts < 2 || d < 2 * parts {
            return Err(Error::InvalidInput(format!("dimension {d} cannot host {parts} non-trivial parts")));
        }
        let events = ProjectorSet::equal_parts(d, parts)?;
        let rho = InitialState::single(x1);
        let terms: Vec<Array2<c64>> = (0..samples)
            .into_par_iter()
            .map(|s| {
                let stream = ((di as u64) << 32) | s as u64;
                let u = Propagator { tau: 1.0, matrix: haar_unitary_stream(d, seed, stream)? };
                decoherence_terms(x1, x3, &events, &u, &rho)
            })
            .collect::<Result<_>>()?;
        let offsum: Vec<f64> = terms
            .iter()
            .map(|t| t.indexed_iter().filter(|((i, j), _)| i != j).map(|(_, z)| z.re).sum())
            .collect();
        let sq: Vec<f64> = offsum.iter().map(|v| v * v).collect();
        let (ms, ms_se) = jackknife(&sq, &sq, |a, _| a);
        rms.push(ms.sqrt());
        rms_se.push(ms_se / (2.0 * ms.sqrt()));
        let mut means = Vec::new();
        for i in 0..parts {
            for j in 0..parts {
                if i == j {
                    continue;
                }
                let re: Vec<f64> = terms.iter().map(|t| t[[i, j]].re).collect();
                let im: Vec<f64> = terms.iter().map(|t| t[[i, j]].im).collect();
                let (mr, sr) = jackknife(&re, &re, |a, _| a);
                let (mi, si) = jackknife(&im, &im, |a, _| a);
                means.push(TermMean { i, j, mean_re: mr, mean_im: mi, stderr_re: sr, stderr_im: si });
            }
        }
        term_means.push(means);
    }
    let lx: Vec<f64> = dims.iter().map(|&d| (d as f64).ln()).collect();
    let ly: Vec<f64> = rms.iter().map(|r| r.ln()).collect();
    let lvar: Vec<f64> = rms.iter().zip(&rms_se).map(|(r, s)| (s / r).powi(2)).collect();
    let (slope, se) = if dims.len() >= 2 { weighted_slope(&lx, &ly, &lvar) } else { (f64::NAN, f64::NAN) };
    Ok(HaarReport {
        dims: dims.to_vec(),
        parts,
        samples,
        seed,
        rms_offdiagonal: rms,
        rms_stderr: rms_se,
        fitted_exponent: slope,
        exponent_stderr: se,
        exponent_ci: [slope - 1.96 * se, slope + 1.96 * se],
        term_means,
    })
}

/// How [`haar_markov_experiment`] evaluates the conditionals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum HaarRoute {
    /// Sub-blocks of `U` between coordinate projectors.
    Reduced,
    /// Density-matrix history probabilities on the full space.
    Direct,
}

#[derive(Clone, Debug, Serialize)]
pub struct HaarMarkovReport {
    pub dims: Vec<usize>,
    pub parts: usize,
    pub samples: usize,
    pub seed: u64,
    /// `|w(x3|x1,x2; pi_1) - w(x3|x2; pi_2)|` per dimension and sample.
    pub deviations: Vec<Vec<f64>>,
    pub mean_deviation: Vec<f64>,
    pub median_deviation: Vec<f64>,
}

impl HaarMarkovReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "dim,mean_deviation,median_deviation")?;
        for ((d, m), md) in self.dims.iter().zip(&self.mean_deviation).zip(&self.median_deviation) {
            writeln!(w, "{d},{m},{md}")?;
        }
        Ok(())
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Compares the two-step conditional `w(x3 | x1, x2)` for `rho = pi_1 / tr`
/// with the one-step prediction `tr{pi_3 U pi_2 U^H} / tr(pi_2)` for Haar
/// unitaries; path `0 -> 1 -> 2` through an equal-parts family (labels taken
/// modulo `parts`).
pub fn haar_markov_experiment(dims: &[usize], parts: usize, samples: usize, seed: u64, route: HaarRoute) -> Result<HaarMarkovReport> {
    if samples == 0 || parts == 0 {
        return Err(Error::InvalidInput("need at least one sample and one part".into()));
    }
    let lbl = |k: usize| EventLabel::X((k % parts) as i32);
    let (x1, x2, x3) = (lbl(0), lbl(1), lbl(2));
    let mut deviations = Vec::new();
    for (di, &d) in dims.iter().enumerate() {
        let events = ProjectorSet::equal_parts(d, parts)?;
        let devs: Vec<f64> = (0..samples)
            .into_par_iter()
            .map(|s| {
                let stream = ((di as u64) << 32) | s as u64;
                let u = Propagator { tau: 1.0, matrix: haar_unitary_stream(d, seed, stream)? };
                let (long, short) = match route {
                    HaarRoute::Reduced => reduced_conditionals(&events, &u.matrix, x1, x2, x3)?,
                    HaarRoute::Direct => direct_conditionals(&events, &u, x1, x2, x3)?,
                };
                Ok((long - short).abs())
            })
            .collect::<Result<_>>()?;
        deviations.push(devs);
    }
    Ok(HaarMarkovReport {
        dims: dims.to_vec(),
        parts,
        samples,
        seed,
        mean_deviation: deviations.iter().map(|d| d.iter().sum::<f64>() / d.len() as f64).collect(),
        median_deviation: deviations.iter().map(|d| median(d)).collect(),
        deviations,
    })
}

fn rows_of(events: &ProjectorSet, l: EventLabel) -> Result<Vec<usize>> {
    let p = events.get(l)?;
    Ok(p.pieces.as_ref().map(|ps| ps.iter().flat_map(|q| q.rows.clone()).collect()).unwrap_or_default())
}

fn reduced_conditionals(events: &ProjectorSet, u: &Array2<c64>, x1: EventLabel, x2: EventLabel, x3: EventLabel) -> Result<(f64, f64)> {
    let (r1, r2, r3) = (rows_of(events, x1)?, rows_of(events, x2)?, rows_of(events, x3)?);
    let a21 = u.select(Axis(0), &r2).select(Axis(1), &r1);
    let a32 = u.select(Axis(0), &r3).select(Axis(1), &r2);
    let p12 = frobenius_sq(a21.view());
    let p123 = frobenius_sq(a32.dot(&a21).view());
    let short = frobenius_sq(a32.view()) / r2.len() as f64;
    Ok((p123 / p12, short))
}

fn direct_conditionals(events: &ProjectorSet, u: &Propagator, x1: EventLabel, x2: EventLabel, x3: EventLabel) -> Result<(f64, f64)> {
    let long = HistorySpec::from_first_label(vec![Slot::Measured(x1), Slot::Measured(x2), Slot::Measured(x3)], u.tau)?;
    let short = HistorySpec::from_first_label(vec![Slot::Measured(x2), Slot::Measured(x3)], u.tau)?;
    let p123 = history_probability_density(&long, u, events)?;
    let p12 = history_probability_density(&long.without_last(), u, events)?;
    let p23 = history_probability_density(&short, u, events)?;
    Ok((p123 / p12, p23))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jackknife_of_mean_is_standard_error() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let (m, se) = jackknife(&x, &x, |a, _| a);
        let mean = 3.5;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        assert!((m - mean).abs() < 1e-15);
        assert!((se - (var / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn projected_state_is_normalized() {
        let pi = LinearOperator::real_diagonal(&[1.0, 0.0, 1.0, 0.0]);
        for seed in 0..20 {
            let psi = random_projected_state(&pi, seed).unwrap();
            let n: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
            assert!((n - 1.0).abs() < 1e-12);
            assert_eq!(psi[1], c64::new(0.0, 0.0));
        }
        assert!(random_projected_state(&LinearOperator::real_diagonal(&[0.0, 0.0]), 1).is_err());
    }

    #[test]
    fn rank_one_state_is_the_ray() {
        let pi = LinearOperator::real_diagonal(&[0.0, 1.0, 0.0]);
        for seed in 0..10 {
            let psi = random_projected_state(&pi, seed).unwrap();
            assert!((psi[1].norm() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn haar_is_unitary_and_reproducible() {
        for seed in 0..5 {
            let u = haar_unitary(6, seed).unwrap();
            assert!(unitarity_error(&u) < 1e-12);
            assert_eq!(u, haar_unitary(6, seed).unwrap());
        }
        assert!(haar_unitary(1, 0).is_err());
    }

    #[test]
    fn too_few_samples_refused() {
        let events = ProjectorSet::equal_parts(6, 3).unwrap();
        let spec = HistorySpec::from_first_label(vec![Slot::x(0), Slot::x(1)], 1.0).unwrap();
        let u = Propagator::identity(6);
        let mut u1 = u.clone();
        u1.tau = 1.0;
        assert!(matches!(
            estimate_history_probability(&spec, &events, &u1, 4, 0),
            Err(Error::TooFewSamples { required: 8, got: 4 })
        ));
    }

    #[test]
    fn trivial_family_gives_zero_deviation() {
        let r = haar_markov_experiment(&[4, 8], 1, 10, 3, HaarRoute::Reduced).unwrap();
        assert!(r.deviations.iter().flatten().all(|&d| d < 1e-12));
    }

    #[test]
    fn haar_routes_agree() {
        let a = haar_markov_experiment(&[8], 3, 20, 11, HaarRoute::Reduced).unwrap();
        let b = haar_markov_experiment(&[8], 3, 20, 11, HaarRoute::Direct).unwrap();
        assert!((a.mean_deviation[0] - b.mean_deviation[0]).abs() < 1e-12);
    }
}
