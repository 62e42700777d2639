//! Random-unitary baseline: the off-diagonal decoherence functional shrinks
//! like 1/d and one-step Markov predictions become exact as d grows.
use spinhist::typicality::{haar_consistency_experiment, haar_markov_experiment, HaarRoute};

fn main() -> spinhist::Result<()> {
    let report = haar_consistency_experiment(&[8, 16, 32, 64], 2, 200, 8080)?;
    for (d, (rms, se)) in report.dims.iter().zip(report.rms_offdiagonal.iter().zip(&report.rms_stderr)) {
        println!("d {d:3}  rms off-diagonal {rms:.4} +- {se:.4}");
    }
    println!(
        "exponent {:.3} +- {:.3} (95% CI {:.3} .. {:.3})",
        report.fitted_exponent, report.exponent_stderr, report.exponent_ci[0], report.exponent_ci[1]
    );

    let markov = haar_markov_experiment(&[8, 16, 32, 64], 3, 200, 8081, HaarRoute::Reduced)?;
    for (d, med) in markov.dims.iter().zip(&markov.median_deviation) {
        println!("d {d:3}  median Markov deviation {med:.4}");
    }
    Ok(())
}
