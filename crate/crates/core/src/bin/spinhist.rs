use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spinhist::cli::{run, validate, ExperimentConfig, ExperimentKind};

#[derive(Parser)]
#[command(name = "spinhist", version, about = "Run a spin-ladder history experiment from a JSON config")]
struct Cli {
    #[command(subcommand)]
    experiment: Experiment,
}

#[derive(Subcommand)]
enum Experiment {
    /// Populations under unmeasured evolution and a fitted master equation.
    Relax(RunArgs),
    /// Non-consistency and non-Markovianity against the time step.
    TauSweep(RunArgs),
    /// Non-consistency and non-Markovianity against the coupling.
    BetaSweep(RunArgs),
    /// Non-consistency and non-Markovianity against the system size.
    SizeScaling(RunArgs),
    /// Many-step non-Markovianity of uniform histories.
    ManystepUniform(RunArgs),
    /// Many-step non-Markovianity of sampled trajectories.
    ManystepRandom(RunArgs),
    /// Off-diagonal decoherence functional over Haar unitaries.
    HaarConsistency(RunArgs),
    /// One-step Markov prediction error over Haar unitaries.
    HaarMarkov(RunArgs),
    /// Typicality estimates of random three-slot histories.
    Estimate(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON config (or a previous run's manifest.json); defaults apply otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

impl Experiment {
    fn split(self) -> (ExperimentKind, RunArgs) {
        use Experiment::*;
        match self {
            Relax(a) => (ExperimentKind::Relax, a),
            TauSweep(a) => (ExperimentKind::TauSweep, a),
            BetaSweep(a) => (ExperimentKind::BetaSweep, a),
            SizeScaling(a) => (ExperimentKind::SizeScaling, a),
            ManystepUniform(a) => (ExperimentKind::ManystepUniform, a),
            ManystepRandom(a) => (ExperimentKind::ManystepRandom, a),
            HaarConsistency(a) => (ExperimentKind::HaarConsistency, a),
            HaarMarkov(a) => (ExperimentKind::HaarMarkov, a),
            Estimate(a) => (ExperimentKind::Estimate, a),
        }
    }
}

fn main() -> ExitCode {
    let (kind, args) = Cli::parse().experiment.split();
    let mut config = match &args.config {
        Some(path) => match ExperimentConfig::from_json_file(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: cannot read config {}: {e}", path.display());
                return ExitCode::from(2);
            }
        },
        None => ExperimentConfig::default(),
    };
    if let Some(other) = config.experiment.filter(|k| *k != kind) {
        eprintln!("error: config is for experiment `{other}` but `{kind}` was requested");
        return ExitCode::from(2);
    }
    config.experiment = Some(kind);
    config.seed = args.seed.or(config.seed);
    config.output_dir = args.out.or(config.output_dir);
    config.threads = args.threads.or(config.threads);

    let diags = validate(&config);
    if !diags.is_empty() {
        eprintln!("error: invalid config");
        for d in diags {
            eprintln!("  {d}");
        }
        return ExitCode::from(2);
    }
    match run(&config) {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            println!("wrote {} files to {}", outcome.files.len(), outcome.output_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
