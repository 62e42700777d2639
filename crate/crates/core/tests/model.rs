use std::sync::Arc;

use ndarray::Array1;
use spinhist::c64;
use spinhist::cli::{random_three_slot_histories, LadderSystem, Propagation};
use spinhist::histories::{history_probability, ProjectorSet};
use spinhist::rng::CounterRng;
use spinhist::spectral::{diagonalize, energy_window_projector, krylov_step, propagator, KrylovPropagator, Propagate};
use spinhist::spin_model::{build_basis, build_hamiltonian, ModelParams};
use spinhist::typicality::{estimate_history_probability, haar_unitary_stream, ks_statistic};

#[test]
fn krylov_matches_dense_at_twelve_spins() {
    let p = ModelParams { n: 3, ..Default::default() };
    let basis = build_basis(12, 0.0).unwrap();
    let h = build_hamiltonian(&p, &basis, true).unwrap();
    let spec = diagonalize(&h).unwrap();
    let mut rng = CounterRng::new(77);
    let psi: Array1<c64> = (0..basis.dim()).map(|_| rng.complex_normal()).collect();
    let psi = &psi / c64::new(psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt(), 0.0);
    for tau in [0.1, 1.0, 10.0] {
        let exact = propagator(&spec, tau).unwrap().matrix.dot(&psi);
        let approx = krylov_step(&h, &psi, tau, 30).unwrap();
        let err = (&exact - &approx).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        assert!(err < 1e-8, "tau {tau}: {err:e}");
    }
}

#[test]
fn krylov_propagator_agrees_on_blocks() {
    let p = ModelParams { n: 2, ..Default::default() };
    let sys = LadderSystem::build(&p, Propagation::Dense).unwrap();
    let kp = KrylovPropagator::new(Arc::new(build_hamiltonian(&p, &sys.basis, true).unwrap()), 3.0);
    let b = sys.events.full_factor().unwrap();
    let dense = propagator(sys.spectrum.as_ref().unwrap(), 3.0).unwrap();
    let err = (&kp.forward(b.view()).unwrap() - &dense.forward(b.view()).unwrap()).iter().map(|z| z.norm()).fold(0.0, f64::max);
    assert!(err < 1e-8, "{err:e}");
    let err = (&kp.backward(b.view()).unwrap() - &dense.backward(b.view()).unwrap()).iter().map(|z| z.norm()).fold(0.0, f64::max);
    assert!(err < 1e-8, "{err:e}");
}

#[test]
fn window_projector_trace_counts_levels() {
    let p = ModelParams { n: 2, ..Default::default() };
    let basis = build_basis(8, 0.0).unwrap();
    let h0 = build_hamiltonian(&p, &basis, false).unwrap();
    let spec0 = diagonalize(&h0).unwrap();
    let pi = energy_window_projector(&spec0, p.window()).unwrap();
    let inside = spec0.eigenvalues.iter().filter(|&&e| e >= -1.2 - 1e-12 && e <= 0.6 + 1e-12).count();
    let dense = pi.to_dense();
    let tr: f64 = dense.diag().iter().map(|z| z.re).sum();
    assert!((tr - inside as f64).abs() < 1e-10);
    assert!(pi.idempotency_error() < 1e-10);
    assert!(pi.hermiticity_error() < 1e-10);
}

#[test]
fn event_family_is_orthogonal_and_complete() {
    let sys = LadderSystem::build(&ModelParams { n: 2, ..Default::default() }, Propagation::Dense).unwrap();
    assert!(sys.events.verify().unwrap() < 1e-10);
    let dense: Vec<_> = sys.events.projectors.iter().map(|p| p.to_dense().unwrap()).collect();
    let mut sum = ndarray::Array2::<c64>::zeros((70, 70));
    for (a, pa) in dense.iter().enumerate() {
        sum += pa;
        assert!((&pa.dot(pa) - pa).iter().map(|z| z.norm()).fold(0.0, f64::max) < 1e-10);
        for pb in &dense[a + 1..] {
            assert!(pa.dot(pb).iter().map(|z| z.norm()).fold(0.0, f64::max) < 1e-10);
        }
    }
    let id_err = (&sum - &ndarray::Array2::<c64>::eye(70)).iter().map(|z| z.norm()).fold(0.0, f64::max);
    assert!(id_err < 1e-10);
}

#[test]
fn haar_overlaps_follow_beta_distribution() {
    // |<e_0|U|e_1>|^2 ~ Beta(1, d - 1)
    let d = 8;
    let samples: Vec<f64> = (0..10_000).map(|s| haar_unitary_stream(d, 4242, s).unwrap()[[0, 1]].norm_sqr()).collect();
    let ks = ks_statistic(&samples, |x| 1.0 - (1.0 - x.clamp(0.0, 1.0)).powi(d as i32 - 1));
    // Kolmogorov critical value at the 1e-3 level
    assert!(ks < 1.949 / (samples.len() as f64).sqrt(), "KS = {ks}");
}

#[test]
fn estimator_is_unbiased_at_eight_spins() {
    let sys = LadderSystem::build(&ModelParams { n: 2, ..Default::default() }, Propagation::Dense).unwrap();
    let u = propagator(sys.spectrum.as_ref().unwrap(), 10.0).unwrap();
    let specs = random_three_slot_histories(&sys.events, 50, 10.0, 31).unwrap();
    let mut z_sum = 0.0;
    let mut used = 0;
    for (k, spec) in specs.iter().enumerate() {
        let exact = history_probability(spec, &u, &sys.events).unwrap().raw_probability;
        let est = estimate_history_probability(spec, &sys.events, &u, 16, 500 + k as u64).unwrap();
        if est.stderr > 0.0 {
            z_sum += (est.mean - exact) / est.stderr;
            used += 1;
        }
    }
    let pooled = z_sum / (used as f64).sqrt();
    assert!(pooled.abs() <= 3.0, "pooled z = {pooled}");
}

#[test]
fn estimator_is_reproducible() {
    let sys = LadderSystem::build(&ModelParams { n: 2, ..Default::default() }, Propagation::Dense).unwrap();
    let u = propagator(sys.spectrum.as_ref().unwrap(), 4.0).unwrap();
    let spec = &random_three_slot_histories(&sys.events, 1, 4.0, 5).unwrap()[0];
    let a = estimate_history_probability(spec, &sys.events, &u, 12, 99).unwrap();
    let b = estimate_history_probability(spec, &sys.events, &u, 12, 99).unwrap();
    assert_eq!(a.mean.to_bits(), b.mean.to_bits());
    assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
}

#[test]
fn lean_family_matches_explicit_family() {
    let p = ModelParams { n: 2, ..Default::default() };
    let dense = LadderSystem::build(&p, Propagation::Dense).unwrap();
    let lean = LadderSystem::build(&p, Propagation::Krylov).unwrap();
    let ranks = |e: &ProjectorSet| e.projectors.iter().map(|p| p.rank).collect::<Vec<_>>();
    assert_eq!(ranks(&dense.events), ranks(&lean.events));
    let spec = &random_three_slot_histories(&dense.events, 1, 6.0, 8).unwrap()[0];
    let a = history_probability(spec, dense.propagator(6.0).unwrap().as_ref(), &dense.events).unwrap();
    let b = history_probability(spec, lean.propagator(6.0).unwrap().as_ref(), &lean.events).unwrap();
    assert!((a.raw_probability - b.raw_probability).abs() < 1e-8);
}
