//! How much memory a long run of identical outcomes carries: the conditional
//! probability of one more repeat against the number of conditioned steps.
use spinhist::cli::{LadderSystem, Propagation};
use spinhist::histories::{EventLabel, TransferBlocks};
use spinhist::spin_model::ModelParams;
use spinhist::stochastic::manystep_analysis;

fn main() -> spinhist::Result<()> {
    let sys = LadderSystem::build(&ModelParams::default(), Propagation::Dense)?;
    let u = sys.propagator(0.26 * 20.0)?;
    let tb = TransferBlocks::new(&sys.events, u.as_ref())?;
    for x in [0, 2] {
        let report = manystep_analysis(&vec![EventLabel::X(x); 22], &tb, 20)?;
        println!("X = {x}  monotone {:?}", report.monotone);
        for (lambda, (w, m)) in report.omega_lambda.iter().zip(&report.mbar_lambda).enumerate().step_by(3) {
            println!("  lambda {:2}  w {w:.5}  Mbar {m:.2e}", lambda + 1);
        }
    }
    Ok(())
}
