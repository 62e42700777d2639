//! Estimating history probabilities from a handful of random states and
//! comparing with the exact value.
use spinhist::cli::{random_three_slot_histories, LadderSystem, Propagation};
use spinhist::histories::{format_path, history_probability};
use spinhist::spin_model::ModelParams;
use spinhist::typicality::estimate_history_probability;

fn main() -> spinhist::Result<()> {
    let tau = 10.0;
    let sys = LadderSystem::build(&ModelParams::default(), Propagation::Dense)?;
    let u = sys.propagator(tau)?;
    for (k, spec) in random_three_slot_histories(&sys.events, 8, tau, 7)?.iter().enumerate() {
        let exact = history_probability(spec, u.as_ref(), &sys.events)?.raw_probability;
        let est = estimate_history_probability(spec, &sys.events, u.as_ref(), 64, 100 + k as u64)?;
        let z = if est.stderr > 0.0 { (est.mean - exact) / est.stderr } else { 0.0 };
        println!(
            "{:<24} exact {exact:.5}  estimate {:.5} +- {:.5}  z {z:+.2}",
            format_path(&spec.slots),
            est.mean,
            est.stderr
        );
    }
    Ok(())
}
