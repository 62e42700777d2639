//! Spectrum of the uncoupled ladders resolved by X, how many levels fall in
//! the energy window, and the event ranks; writes `spectrum.csv`.
use std::fs::File;
use std::io::BufWriter;

use spinhist::histories::ProjectorSet;
use spinhist::spectral::{diagonalize_uncoupled, window_counts};
use spinhist::spin_model::{build_basis, ModelParams};

fn main() -> spinhist::Result<()> {
    let params = ModelParams::default();
    let basis = build_basis(params.num_spins(), params.total_sz)?;
    let blocks = diagonalize_uncoupled(&params, &basis)?;
    let spectrum = blocks.to_dense();
    let (below, inside, above) = window_counts(spectrum.eigenvalues.iter().copied(), params.window());
    println!("dim {}  below {below}  inside {inside}  above {above}", spectrum.dim());

    let events = ProjectorSet::from_energy_window(&blocks, params.window())?;
    for (l, p) in events.labels.iter().zip(&events.projectors) {
        println!("  {l:>10}  rank {}", p.rank);
    }
    spectrum.write_csv(BufWriter::new(File::create("spectrum.csv")?))?;
    println!("wrote spectrum.csv");
    Ok(())
}
