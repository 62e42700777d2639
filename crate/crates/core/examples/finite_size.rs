//! The same consistency and Markov measures at 8, 12 and (with `--sixteen`)
//! 16 spins; the largest size runs on Krylov propagation and takes a while.
use std::time::Instant;

use spinhist::cli::{consistency_pair, LadderSystem, Propagation};
use spinhist::histories::parse_path;
use spinhist::spin_model::ModelParams;

fn main() -> spinhist::Result<()> {
    let tau = 0.5 * 20.0;
    let cp = parse_path("2 -- 0")?;
    let mp = parse_path("2 0 0")?;
    let mut sizes = vec![(2, Propagation::Dense), (3, Propagation::Dense)];
    if std::env::args().any(|a| a == "--sixteen") {
        sizes.push((4, Propagation::Krylov));
    }
    for (n, route) in sizes {
        let start = Instant::now();
        let sys = LadderSystem::build(&ModelParams { n, ..Default::default() }, route)?;
        let (c, m) = consistency_pair(&sys, tau, &cp, &mp)?;
        println!(
            "N = {:2}  dim {:5}  {:6}  C {c:.4}  M {m:.4}  ({:.1} s)",
            4 * n,
            sys.dim(),
            sys.route(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
