//! Populations of X(t) after starting in the X = 0 event, and the
//! nearest-neighbour master equation that best reproduces them.
use spinhist::cli::{LadderSystem, Propagation};
use spinhist::histories::{EventLabel, InitialState};
use spinhist::spin_model::ModelParams;
use spinhist::stochastic::{fit_rate_equation, relaxation_curves};

fn main() -> spinhist::Result<()> {
    let tau_r = 20.0;
    let sys = LadderSystem::build(&ModelParams::default(), Propagation::Dense)?;
    let times: Vec<f64> = (0..=80).map(|k| k as f64 * 2.0 * tau_r / 80.0).collect();
    let table = relaxation_curves(sys.spectrum.as_ref().unwrap(), &sys.events, &InitialState::single(EventLabel::X(0)), &times)?;

    println!("t/tau_r  {}", table.labels.iter().map(|l| format!("{l:>8}")).collect::<String>());
    for (t, row) in table.times.iter().zip(&table.populations).step_by(10) {
        println!("{:6.2}   {}", t / tau_r, row.iter().map(|p| format!("{p:8.4}")).collect::<String>());
    }
    println!("max leakage out of the window: {:.3e}", table.max_leakage());

    let fit = fit_rate_equation(&table, tau_r)?;
    for (k, (up, down)) in fit.rates_up.iter().zip(&fit.rates_down).enumerate() {
        println!("{} <-> {}: up {up:.4}  down {down:.4}", fit.labels[k], fit.labels[k + 1]);
    }
    println!("master equation max deviation {:.4}", fit.max_deviation);
    Ok(())
}
