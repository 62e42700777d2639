//! Non-consistency of `2 -- 0` and non-Markovianity of `2 0 0` as the time
//! step grows from a small fraction of the relaxation time.
use spinhist::cli::{consistency_pair, LadderSystem, Propagation};
use spinhist::histories::parse_path;
use spinhist::spin_model::ModelParams;

fn main() -> spinhist::Result<()> {
    let tau_r = 20.0;
    let cp = parse_path("2 -- 0")?;
    let mp = parse_path("2 0 0")?;
    for beta in [0.2, 0.5, 1.0] {
        let sys = LadderSystem::build(&ModelParams::default().with_beta(beta), Propagation::Dense)?;
        println!("beta = {beta}");
        for k in [1, 2, 4, 6, 8, 10, 15, 20] {
            let tau = k as f64 / 20.0 * tau_r;
            let (c, m) = consistency_pair(&sys, tau, &cp, &mp)?;
            println!("  tau/tau_r {:5.2}  C {c:.4}  M {m:.4}", tau / tau_r);
        }
    }
    Ok(())
}
