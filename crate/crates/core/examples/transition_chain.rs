//! The one-step transition matrix between events, the classical chain it
//! generates, and a sampled measurement record.
use spinhist::cli::{LadderSystem, Propagation};
use spinhist::histories::EventLabel;
use spinhist::spectral::propagator;
use spinhist::spin_model::ModelParams;
use spinhist::stochastic::{chain_propagate, measured_populations, sample_trajectory, transition_matrix, ResetPolicy};

fn main() -> spinhist::Result<()> {
    let sys = LadderSystem::build(&ModelParams::default(), Propagation::Dense)?;
    let u = propagator(sys.spectrum.as_ref().unwrap(), 0.5 * 20.0)?;
    let tm = transition_matrix(&sys.events, &u)?;
    tm.write_csv(std::io::stdout().lock())?;

    let mut p0 = vec![0.0; sys.events.len()];
    p0[sys.events.index_of(EventLabel::X(0))?] = 1.0;
    let chain = chain_propagate(&tm, &p0, 5)?;
    let quantum = measured_populations(&sys.events, &u, &p0, 5, ResetPolicy::MaxEntropy)?;
    for (step, (a, b)) in chain.iter().zip(&quantum).enumerate() {
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        println!("step {step}: chain vs measured populations differ by {diff:.1e}");
    }

    let traj = sample_trajectory(&tm, EventLabel::X(0), 30, 42)?;
    println!("{}", traj.outcomes.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" "));
    Ok(())
}
