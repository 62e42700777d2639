//! Config-driven experiment runner: one JSON config in, CSV files plus a
//! manifest and a plain-text summary out.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::histories::{
    history_probability, parse_path, EventLabel, HistorySpec, ProjectorSet, Slot, ThreeSlotEvaluator,
    TransferBlocks,
};
use crate::operator::LinearOperator;
use crate::rng::CounterRng;
use crate::spectral::{
    dense_threshold, diagonalize, diagonalize_uncoupled, propagator, KrylovPropagator, Propagate, Spectrum,
};
use crate::spin_model::{build_basis, build_hamiltonian, ModelParams, SectorBasis};
use crate::stochastic::{
    fit_rate_equation, manystep_analysis, relaxation_curves, sample_trajectory, TransitionMatrix,
};
use crate::typicality::{
    estimate_history_probability, haar_consistency_experiment, haar_markov_experiment, HaarRoute, MIN_SAMPLES,
};

/// Largest sector dimension the `auto` route diagonalizes densely.
pub const AUTO_DENSE_LIMIT: usize = 4096;

pub const DEFAULT_BETAS: [f64; 3] = [0.2, 0.5, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Relax,
    TauSweep,
    BetaSweep,
    SizeScaling,
    ManystepUniform,
    ManystepRandom,
    HaarConsistency,
    HaarMarkov,
    Estimate,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 9] = [
        Self::Relax,
        Self::TauSweep,
        Self::BetaSweep,
        Self::SizeScaling,
        Self::ManystepUniform,
        Self::ManystepRandom,
        Self::HaarConsistency,
        Self::HaarMarkov,
        Self::Estimate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Relax => "relax",
            Self::TauSweep => "tau_sweep",
            Self::BetaSweep => "beta_sweep",
            Self::SizeScaling => "size_scaling",
            Self::ManystepUniform => "manystep_uniform",
            Self::ManystepRandom => "manystep_random",
            Self::HaarConsistency => "haar_consistency",
            Self::HaarMarkov => "haar_markov",
            Self::Estimate => "estimate",
        }
    }

    pub fn is_randomized(self) -> bool {
        matches!(self, Self::ManystepRandom | Self::HaarConsistency | Self::HaarMarkov | Self::Estimate)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How unitary steps are computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propagation {
    /// Dense up to [`AUTO_DENSE_LIMIT`], Krylov above.
    #[default]
    Auto,
    Dense,
    Krylov,
}

/// Full description of one run. Times (`tau`, `taus`, `t_max`) are in units
/// of `tau_r`; `tau_r` itself is in units of `1/J`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<ExperimentKind>,
    pub model: ModelParams,
    /// Overrides `model.n` with `N / 4`.
    pub num_spins: Option<usize>,
    pub tau_r: f64,
    /// Defaults to 0.26 for the many-step experiments and 0.5 otherwise.
    pub tau: Option<f64>,
    pub taus: Vec<f64>,
    pub betas: Vec<f64>,
    pub sizes: Vec<usize>,
    pub t_max: f64,
    pub t_points: usize,
    pub initial_label: EventLabel,
    pub consistency_path: String,
    pub markov_path: String,
    pub labels: Vec<EventLabel>,
    pub lambda_max: usize,
    pub histories: Option<usize>,
    pub dims: Option<Vec<usize>>,
    pub parts: Option<usize>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub propagation: Propagation,
    pub threads: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            model: ModelParams::default(),
            num_spins: None,
            tau_r: 20.0,
            tau: None,
            taus: (1..=20).map(|k| k as f64 / 20.0).collect(),
            betas: DEFAULT_BETAS.to_vec(),
            sizes: vec![12, 16],
            t_max: 2.0,
            t_points: 81,
            initial_label: EventLabel::X(0),
            consistency_path: "2 -- 0".into(),
            markov_path: "2 0 0".into(),
            labels: vec![EventLabel::X(0)],
            lambda_max: 20,
            histories: None,
            dims: None,
            parts: None,
            samples: None,
            seed: None,
            propagation: Propagation::Auto,
            threads: None,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        Self { experiment: Some(kind), ..Default::default() }
    }

    /// Reads a config, or the config embedded in a run manifest.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        if value.get("config_sha256").is_some() {
            if let Some(inner) = value.get_mut("config") {
                value = inner.take();
            }
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn kind(&self) -> Option<ExperimentKind> {
        self.experiment
    }

    /// Model parameters after applying `num_spins`.
    pub fn model_params(&self) -> ModelParams {
        let mut p = self.model.clone();
        if let Some(n) = self.num_spins {
            p.n = n / 4;
        }
        p
    }

    /// Time step in units of `1/J`.
    pub fn tau_abs(&self) -> f64 {
        let frac = self.tau.unwrap_or(match self.experiment {
            Some(ExperimentKind::ManystepUniform | ExperimentKind::ManystepRandom) => 0.26,
            _ => 0.5,
        });
        frac * self.tau_r
    }

    pub fn dims(&self) -> Vec<usize> {
        self.dims.clone().unwrap_or_else(|| match self.experiment {
            Some(ExperimentKind::HaarMarkov) => vec![8, 16, 32, 64],
            _ => vec![8, 16, 32, 64, 128],
        })
    }

    pub fn parts(&self) -> usize {
        self.parts.unwrap_or(match self.experiment {
            Some(ExperimentKind::HaarMarkov) => 3,
            _ => 2,
        })
    }

    pub fn samples(&self) -> usize {
        self.samples.unwrap_or(match self.experiment {
            Some(ExperimentKind::Estimate) => 64,
            _ => 200,
        })
    }

    pub fn histories(&self) -> usize {
        self.histories.unwrap_or(match self.experiment {
            Some(ExperimentKind::Estimate) => 50,
            _ => 4,
        })
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("out").join(self.experiment.map_or("run", |k| k.name())))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// One problem with a config field.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostic {
    pub field: String,
    pub reason: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

fn three_slot_path(text: &str, gap: bool) -> std::result::Result<Vec<Slot>, String> {
    let slots = parse_path(text).map_err(|e| e.to_string())?;
    let ok = slots.len() == 3
        && slots[0].label().is_some()
        && slots[2].label().is_some()
        && (slots[1] == Slot::Unmeasured) == gap;
    if !ok {
        let want = if gap { "a -- b" } else { "a b c" };
        return Err(format!("expected a three-slot path of the form \"{want}\", got \"{text}\""));
    }
    Ok(slots)
}

/// Field-level problems; empty iff [`run`] would start.
pub fn validate(config: &ExperimentConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut bad = |field: &str, reason: String| out.push(Diagnostic { field: field.into(), reason });
    let Some(kind) = config.experiment else {
        bad("experiment", "missing; choose one of relax, tau_sweep, ...".into());
        return out;
    };
    let m = &config.model;
    if let Some(n) = config.num_spins {
        if n == 0 || n % 4 != 0 {
            bad("num_spins", format!("N must be a multiple of 4 (got {n})"));
        }
    }
    let p = config.model_params();
    if p.n == 0 || p.num_spins() > 24 {
        bad("model.n", format!("4n must lie in 4..=24 (got n = {})", p.n));
    }
    if !(m.j.is_finite() && m.j > 0.0) {
        bad("model.j", format!("must be positive (got {})", m.j));
    }
    if !m.delta.is_finite() {
        bad("model.delta", "must be finite".into());
    }
    if !(m.beta.is_finite() && m.beta >= 0.0) {
        bad("model.beta", format!("must be >= 0 (got {})", m.beta));
    }
    let [lo, hi] = m.energy_window;
    if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
        bad("model.energy_window", format!("E_min must be below E_max (got [{lo}, {hi}])"));
    }
    if p.n > 0 && p.num_spins() <= 24 {
        if let Err(e) = crate::spin_model::up_count(p.num_spins(), m.total_sz) {
            bad("model.total_sz", e.to_string());
        }
    }
    if !(config.tau_r.is_finite() && config.tau_r > 0.0) {
        bad("tau_r", format!("must be positive (got {})", config.tau_r));
    }
    if let Some(t) = config.tau {
        if !(t.is_finite() && t > 0.0) {
            bad("tau", format!("must be positive (got {t})"));
        }
    }
    if config.threads == Some(0) {
        bad("threads", "must be at least 1".into());
    }
    if kind.is_randomized() && config.seed.is_none() {
        bad("seed", format!("{kind} is randomized and needs a seed (config or --seed)"));
    }
    let uses_paths = matches!(kind, ExperimentKind::TauSweep | ExperimentKind::BetaSweep | ExperimentKind::SizeScaling);
    if uses_paths {
        if let Err(e) = three_slot_path(&config.consistency_path, true) {
            bad("consistency_path", e);
        }
        if let Err(e) = three_slot_path(&config.markov_path, false) {
            bad("markov_path", e);
        }
    }
    match kind {
        ExperimentKind::Relax => {
            if !(config.t_max.is_finite() && config.t_max > 0.0) {
                bad("t_max", format!("must be positive (got {})", config.t_max));
            }
            if config.t_points < 2 {
                bad("t_points", "need at least 2 grid points".into());
            }
        }
        ExperimentKind::TauSweep => {
            if config.taus.is_empty() {
                bad("taus", "must not be empty".into());
            }
            if config.taus.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
                bad("taus", "every entry must be positive".into());
            }
            if config.betas.is_empty() {
                bad("betas", "must not be empty".into());
            }
        }
        ExperimentKind::BetaSweep => {
            if config.betas.is_empty() || config.betas.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
                bad("betas", "need at least one entry, all >= 0".into());
            }
        }
        ExperimentKind::SizeScaling => {
            if config.sizes.is_empty() {
                bad("sizes", "must not be empty".into());
            }
            for &n in &config.sizes {
                if n == 0 || n % 4 != 0 {
                    bad("sizes", format!("N must be a multiple of 4 (got {n})"));
                } else if n > 24 {
                    bad("sizes", format!("N = {n} exceeds the 24-spin limit"));
                }
            }
        }
        ExperimentKind::ManystepUniform | ExperimentKind::ManystepRandom => {
            if config.lambda_max == 0 {
                bad("lambda_max", "must be at least 1".into());
            }
            if kind == ExperimentKind::ManystepUniform && config.labels.is_empty() {
                bad("labels", "must not be empty".into());
            }
            if kind == ExperimentKind::ManystepRandom && config.histories() == 0 {
                bad("histories", "must be at least 1".into());
            }
        }
        ExperimentKind::HaarConsistency | ExperimentKind::HaarMarkov => {
            let parts = config.parts();
            if parts < 2 {
                bad("parts", format!("need at least 2 parts (got {parts})"));
            }
            let dims = config.dims();
            if dims.is_empty() {
                bad("dims", "must not be empty".into());
            }
            for d in dims {
                if d < 2 * parts {
                    bad("dims", format!("dimension {d} is too small for {parts} parts"));
                }
            }
            if config.samples() < MIN_SAMPLES {
                bad("samples", format!("need at least {MIN_SAMPLES} (got {})", config.samples()));
            }
        }
        ExperimentKind::Estimate => {
            if config.samples() < MIN_SAMPLES {
                bad("samples", format!("need at least {MIN_SAMPLES} (got {})", config.samples()));
            }
            if config.histories() == 0 {
                bad("histories", "must be at least 1".into());
            }
        }
    }
    out
}

/// Why a run did not complete.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid config:\n{}", .0.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n"))]
    Config(Vec<Diagnostic>),
    #[error("resource limit: {0}")]
    Resource(Error),
    #[error(transparent)]
    Failed(Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Resource(_) => 3,
            RunError::Failed(_) => 1,
        }
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::DenseThresholdExceeded { .. } | Error::KrylovNonConvergence { .. } | Error::Io(_) => {
                RunError::Resource(e)
            }
            other => RunError::Failed(other),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Resource(Error::Io(e))
    }
}

/// A ladder pair with its event family and, on the dense route, the full
/// eigensystem.
pub struct LadderSystem {
    pub params: ModelParams,
    pub basis: SectorBasis,
    pub hamiltonian: Arc<LinearOperator>,
    pub events: ProjectorSet,
    pub spectrum: Option<Spectrum>,
}

impl LadderSystem {
    pub fn build(params: &ModelParams, route: Propagation) -> Result<Self> {
        params.validate()?;
        let basis = build_basis(params.num_spins(), params.total_sz)?;
        let dense = match route {
            Propagation::Dense => true,
            Propagation::Krylov => false,
            Propagation::Auto => basis.dim() <= AUTO_DENSE_LIMIT.min(dense_threshold()),
        };
        let hamiltonian = Arc::new(build_hamiltonian(params, &basis, true)?);
        let spectrum = if dense { Some(diagonalize(&hamiltonian)?) } else { None };
        let blocks = diagonalize_uncoupled(params, &basis)?;
        let events = if dense {
            ProjectorSet::from_energy_window(&blocks, params.window())?
        } else {
            // the complement is huge and never needs a basis of its own
            ProjectorSet::from_energy_window_lean(&blocks, params.window())?
        };
        Ok(Self { params: params.clone(), basis, hamiltonian, events, spectrum })
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn route(&self) -> &'static str {
        if self.spectrum.is_some() {
            "dense"
        } else {
            "krylov"
        }
    }

    /// `U(tau)` on whichever route the system was built for.
    pub fn propagator(&self, tau: f64) -> Result<Box<dyn Propagate>> {
        match &self.spectrum {
            Some(spec) => Ok(Box::new(propagator(spec, tau)?)),
            None => Ok(Box::new(KrylovPropagator::new(self.hamiltonian.clone(), tau))),
        }
    }

    pub fn dense_spectrum(&self, what: &str) -> Result<&Spectrum> {
        if let Some(spec) = &self.spectrum {
            return Ok(spec);
        }
        let threshold = AUTO_DENSE_LIMIT.min(dense_threshold());
        if self.dim() > threshold {
            return Err(Error::DenseThresholdExceeded { dim: self.dim(), threshold });
        }
        Err(Error::InvalidInput(format!("{what} needs the dense route; set \"propagation\" to \"dense\" or \"auto\"")))
    }
}

/// `C` and `M` for one system and time step.
pub fn consistency_pair(
    sys: &LadderSystem,
    tau: f64,
    consistency_path: &[Slot],
    markov_path: &[Slot],
) -> Result<(f64, f64)> {
    let u = sys.propagator(tau)?;
    let label = |s: &Slot| s.label().expect("validated path");
    let (c1, c3) = (label(&consistency_path[0]), label(&consistency_path[2]));
    let (m1, m2, m3) = (label(&markov_path[0]), label(&markov_path[1]), label(&markov_path[2]));
    let ev = ThreeSlotEvaluator::new(&sys.events, u.as_ref(), c1, c3)?;
    let c = ev.nonconsistency()?;
    let m = if (m1, m3) == (c1, c3) {
        ev.nonmarkovianity(m2)?
    } else {
        ThreeSlotEvaluator::new(&sys.events, u.as_ref(), m1, m3)?.nonmarkovianity(m2)?
    };
    Ok((c, m))
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    fn write(&mut self, name: &str, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> std::io::Result<()> {
        let mut w = BufWriter::new(fs::File::create(self.dir.join(name))?);
        f(&mut w)?;
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }
}

/// What a finished run produced.
#[derive(Clone, Debug, Serialize)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub files: Vec<String>,
    pub summary: Vec<String>,
    pub wall_times: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    experiment: &'a str,
    version: &'a str,
    config_sha256: String,
    seeds: BTreeMap<&'a str, u64>,
    files: &'a [String],
    wall_times: &'a BTreeMap<String, f64>,
    notes: &'a [String],
    config: &'a ExperimentConfig,
}

struct Ctx<'a> {
    config: &'a ExperimentConfig,
    out: Artifacts,
    summary: Vec<String>,
    notes: Vec<String>,
    wall: BTreeMap<String, f64>,
}

impl Ctx<'_> {
    fn timed<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let v = f()?;
        self.wall.insert(stage.to_string(), start.elapsed().as_secs_f64());
        Ok(v)
    }

    fn line(&mut self, s: String) {
        self.summary.push(s);
    }
}

/// Validates and runs `config`, writing every artifact under its output
/// directory. Uses a dedicated worker pool when `threads` is set.
pub fn run(config: &ExperimentConfig) -> std::result::Result<RunOutcome, RunError> {
    let diags = validate(config);
    if !diags.is_empty() {
        return Err(RunError::Config(diags));
    }
    match config.threads {
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| RunError::Resource(Error::InvalidInput(format!("thread pool: {e}"))))?;
            pool.install(|| run_validated(config))
        }
        None => run_validated(config),
    }
}

fn run_validated(config: &ExperimentConfig) -> std::result::Result<RunOutcome, RunError> {
    let kind = config.experiment.expect("validated");
    let dir = config.output_dir();
    fs::create_dir_all(&dir)?;
    let total = Instant::now();
    let mut ctx = Ctx {
        config,
        out: Artifacts { dir: dir.clone(), files: Vec::new() },
        summary: vec![format!("experiment: {kind}")],
        notes: Vec::new(),
        wall: BTreeMap::new(),
    };
    match kind {
        ExperimentKind::Relax => run_relax(&mut ctx)?,
        ExperimentKind::TauSweep => run_tau_sweep(&mut ctx)?,
        ExperimentKind::BetaSweep => run_beta_sweep(&mut ctx)?,
        ExperimentKind::SizeScaling => run_size_scaling(&mut ctx)?,
        ExperimentKind::ManystepUniform => run_manystep_uniform(&mut ctx)?,
        ExperimentKind::ManystepRandom => run_manystep_random(&mut ctx)?,
        ExperimentKind::HaarConsistency => run_haar_consistency(&mut ctx)?,
        ExperimentKind::HaarMarkov => run_haar_markov(&mut ctx)?,
        ExperimentKind::Estimate => run_estimate(&mut ctx)?,
    }
    ctx.wall.insert("total".into(), total.elapsed().as_secs_f64());

    let summary_text = ctx.summary.join("\n") + "\n";
    ctx.out.write("summary.txt", |w| w.write_all(summary_text.as_bytes()))?;
    let mut seeds = BTreeMap::new();
    if let Some(s) = config.seed {
        seeds.insert("seed", s);
    }
    let mut files = ctx.out.files.clone();
    files.push("manifest.json".into());
    let manifest = Manifest {
        experiment: kind.name(),
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: config.hash(),
        seeds,
        files: &files,
        wall_times: &ctx.wall,
        notes: &ctx.notes,
        config,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(RunOutcome { output_dir: dir, files, summary: ctx.summary, wall_times: ctx.wall })
}

fn run_relax(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.config;
    let params = cfg.model_params();
    let sys = ctx.timed("setup", || LadderSystem::build(&params, cfg.propagation))?;
    let spec = sys.dense_spectrum("relax")?;
    let t_end = cfg.t_max * cfg.tau_r;
    let grid: Vec<f64> = (0..cfg.t_points).map(|i| t_end * i as f64 / (cfg.t_points - 1) as f64).collect();
    let init = crate::histories::InitialState::single(cfg.initial_label);
    let table = ctx.timed("relaxation", || relaxation_curves(spec, &sys.events, &init, &grid))?;
    ctx.out.write("relaxation.csv", |w| table.write_csv(w))?;
    let ranks: Vec<String> =
        sys.events.labels.iter().zip(&sys.events.projectors).map(|(l, p)| format!("{l}:{}", p.rank)).collect();
    ctx.line(format!("N = {}, sector dimension {}, route {}", params.num_spins(), sys.dim(), sys.route()));
    ctx.line(format!("event ranks: {}", ranks.join(" ")));
    ctx.line(format!("max leakage over t <= {t_end}: {:e}", table.max_leakage()));
    ctx.line(format!("completeness error: {:e}", table.completeness_error()));
    match table.empirical_relaxation_time(0.02) {
        Some(t) => ctx.line(format!("empirical relaxation time: {t} (configured tau_r = {})", cfg.tau_r)),
        None => ctx.line("empirical relaxation time: not reached on the grid".into()),
    }
    match ctx.timed("master_fit", || fit_rate_equation(&table, cfg.tau_r)) {
        Ok(fit) => {
            ctx.out.write("master_fit.csv", |w| fit.write_csv(&table, w))?;
            ctx.out.write("rates.csv", |w| {
                writeln!(w, "from,to,rate")?;
                for k in 0..fit.rates_up.len() {
                    writeln!(w, "{},{},{}", fit.labels[k], fit.labels[k + 1], fit.rates_up[k])?;
                    writeln!(w, "{},{},{}", fit.labels[k + 1], fit.labels[k], fit.rates_down[k])?;
                }
                Ok(())
            })?;
            ctx.line(format!("master-equation fit: max deviation {}, residual {:e}", fit.max_deviation, fit.residual));
        }
        Err(e) => ctx.line(format!("master-equation fit failed: {e}")),
    }
    let tau = cfg.tau_abs();
    let tm = ctx.timed("transition_matrix", || {
        let u = propagator(spec, tau)?;
        TransitionMatrix::from_blocks(&TransferBlocks::new(&sys.events, &u)?)
    })?;
    ctx.out.write("transition_matrix.csv", |w| tm.write_csv(w))?;
    ctx.line(format!("transition matrix at tau = {tau}: row-sum error {:e}", tm.row_sum_error()));
    Ok(())
}

fn sweep_paths(cfg: &ExperimentConfig) -> (Vec<Slot>, Vec<Slot>) {
    (
        three_slot_path(&cfg.consistency_path, true).expect("validated"),
        three_slot_path(&cfg.markov_path, false).expect("validated"),
    )
}

fn run_tau_sweep(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.config;
    let (cp, mp) = sweep_paths(cfg);
    if cfg.betas == DEFAULT_BETAS {
        ctx.notes.push("beta values 0.2, 0.5, 1.0 are defaults chosen by this tool".into());
    }
    let mut rows = Vec::new();
    for &beta in &cfg.betas {
        let params = cfg.model_params().with_beta(beta);
        let sys = ctx.timed(&format!("setup_beta_{beta}"), || LadderSystem::build(&params, cfg.propagation))?;
        let points: Vec<(f64, String, String)> = ctx.timed(&format!("sweep_beta_{beta}"), || {
            Ok(cfg
                .taus
                .par_iter()
                .map(|&frac| {
                    let pair = consistency_pair(&sys, frac * cfg.tau_r, &cp, &mp);
                    let (c, m) = match pair {
                        Ok((c, m)) => (c.to_string(), m.to_string()),
                        Err(_) => ("NaN".into(), "NaN".into()),
                    };
                    (frac, c, m)
                })
                .collect())
        })?;
        for (frac, c, m) in points {
            rows.push(format!("{beta},{},{frac},{c},{m}", frac * cfg.tau_r));
        }
    }
    ctx.out.write("tau_sweep.csv", |w| {
        writeln!(w, "beta,tau,tau_over_tau_r,nonconsistency,nonmarkovianity")?;
        rows.iter().try_for_each(|r| writeln!(w, "{r}"))
    })?;
    ctx.line(format!(
        "paths: C for {}, M for {}; {} betas x {} taus",
        crate::histories::format_path(&cp),
        crate::histories::format_path(&mp),
        cfg.betas.len(),
        cfg.taus.len()
    ));
    Ok(())
}

fn run_beta_sweep(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.config;
    let (cp, mp) = sweep_paths(cfg);
    let tau = cfg.tau_abs();
    let mut rows = Vec::new();
    for &beta in &cfg.betas {
        let params = cfg.model_params().with_beta(beta);
        let sys = ctx.timed(&format!("setup_beta_{beta}"), || LadderSystem::build(&params, cfg.propagation))?;
        let (c, m) = match consistency_pair(&sys, tau, &cp, &mp) {
            Ok((c, m)) => (c.to_string(), m.to_string()),
            Err(e) => {
                ctx.line(format!("beta {beta}: undefined ({e})"));
                ("NaN".into(), "NaN".into())
            }
        };
        ctx.line(format!("beta {beta}: C = {c}, M = {m}"));
        rows.push(format!("{beta},{c},{m}"));
    }
    ctx.out.write("beta_sweep.csv", |w| {
        writeln!(w, "beta,nonconsistency,nonmarkovianity")?;
        rows.iter().try_for_each(|r| writeln!(w, "{r}"))
    })?;
    ctx.line(format!("tau = {tau}"));
    Ok(())
}

fn run_size_scaling(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.config;
    let (cp, mp) = sweep_paths(cfg);
    let tau = cfg.tau_abs();
    let mut rows = Vec::new();
    for &n in &cfg.sizes {
        let params = ModelParams { n: n / 4, ..cfg.model_params() };
        let (dim, route, c, m) = ctx.timed(&format!("N_{n}"), || {
            let sys = LadderSystem::build(&params, cfg.propagation)?;
            let (c, m) = consistency_pair(&sys, tau, &cp, &mp)?;
            Ok((sys.dim(), sys.route(), c, m))
        })?;
        ctx.line(format!("N = {n} (dim {dim}, {route}): C = {c}, M = {m}"));
        rows.push(format!("{n},{dim},{route},{c},{m}"));
    }
    ctx.out.write("size_scaling.csv", |w| {
        writeln!(w, "num_spins,dim,route,nonconsistency,nonmarkovianity")?;
        rows.iter().try_for_each(|r| writeln!(w, "{r}"))
    })?;
    ctx.line(format!("tau = {tau}, beta = {}", cfg.model.beta));
    Ok(())
}

fn transfer_blocks(ctx: &mut Ctx) -> Result<TransferBlocks> {
    let cfg = ctx.config;
    let params = cfg.model_params();
    let sys = ctx.timed("setup", || LadderSystem::build(&params, cfg.propagation))?;
    let spec = sys.dense_spectrum(cfg.experiment.expect("validated").name())?;
    ctx.line(format!("N = {}, dim {}, tau = {}", params.num_spins(), sys.dim(), cfg.tau_abs()));
    ctx.timed("transfer_blocks", || TransferBlocks::new(&sys.events, &propagator(spec, cfg.tau_abs())?))
}

fn run_manystep_uniform(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.config;
    let tb = transfer_blocks(ctx)?;
    for &label in &cfg.labels {
        let history = vec![label; cfg.lambda_max + 2];
        let report = ctx.timed(&format!("label_{label}"), || manystep_analysis(&history, &tb, cfg.lambda_max))?;
        ctx.out.write(&format!("manystep_uniform_{label}.csv"), |w| report.write_csv(w))?;
        let first = report.mbar_lambda.first().copied().unwrap_or(f64::NAN);
        let last = report.mbar_lambda.last().copied().unwrap_or(f64::NAN);
        let later_below = report.mbar_lambda.iter().skip(1).all(|&m| m < first);
        ctx.line(format!(
            "label {label}: omega non-decreasing {:?}, M_1 = {first}, M_last = {last}, M_(l>1) < M_1: {later_below}{}",
            report.monotone,
            report.truncated.as_ref().map(|t| format!(" ({t})")).unwrap_or_default()
        ));
    }
    Ok(())
}

fn run_manystep_random(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.config;
    let seed = cfg.seed.expect("validated");
    let tb = transfer_blocks(ctx)?;
    let tm = TransitionMatrix::from_blocks(&tb)?;
    let start = cfg.labels.first().copied().unwrap_or(EventLabel::X(0));
    let mut paths = Vec::new();
    for k in 0..cfg.histories() {
        let traj = sample_trajectory(&tm, start, cfg.lambda_max + 2, seed.wrapping_add(k as u64))?;
        let report = manystep_analysis(&traj.outcomes, &tb, cfg.lambda_max)?;
        ctx.out.write(&format!("manystep_random_{k}.csv"), |w| report.write_csv(w))?;
        let peak = report
            .mbar_lambda
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, m)| format!("max M = {m} at lambda = {}", i + 1))
            .unwrap_or_default();
        let labels: Vec<String> = traj.outcomes.iter().map(|l| l.to_string()).collect();
        ctx.line(format!("history {k}: {}; {peak}", labels.join(" ")));
        paths.push((k, traj.seed, labels.join(" ")));
    }
    ctx.out.write("trajectories.csv", |w| {
        writeln!(w, "history,seed,outcomes")?;
        paths.iter().try_for_each(|(k, s, p)| writeln!(w, "{k},{s},{p}"))
    })?;
    Ok(())
}

fn run_haar_consistency(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.config;
    let (dims, parts, samples, seed) = (cfg.dims(), cfg.parts(), cfg.samples(), cfg.seed.expect("validated"));
    let report = ctx.timed("haar", || haar_consistency_experiment(&dims, parts, samples, seed))?;
    ctx.out.write("haar_consistency.csv", |w| report.write_csv(w))?;
    ctx.out.write("haar_terms.csv", |w| {
        writeln!(w, "dim,i,j,mean_re,mean_im,stderr_re,stderr_im")?;
        for (d, terms) in report.dims.iter().zip(&report.term_means) {
            for t in terms {
                writeln!(w, "{d},{},{},{},{},{},{}", t.i, t.j, t.mean_re, t.mean_im, t.stderr_re, t.stderr_im)?;
            }
        }
        Ok(())
    })?;
    ctx.line(format!(
        "fitted exponent {} +- {} (95% CI [{}, {}]) over dims {:?}",
        report.fitted_exponent, report.exponent_stderr, report.exponent_ci[0], report.exponent_ci[1], dims
    ));
    Ok(())
}

fn run_haar_markov(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.config;
    let (dims, parts, samples, seed) = (cfg.dims(), cfg.parts(), cfg.samples(), cfg.seed.expect("validated"));
    let report = ctx.timed("haar", || haar_markov_experiment(&dims, parts, samples, seed, HaarRoute::Reduced))?;
    ctx.out.write("haar_markov.csv", |w| report.write_csv(w))?;
    let decreasing = report.median_deviation.windows(2).all(|w| w[1] < w[0]);
    ctx.line(format!("median deviation per dim: {:?}; strictly decreasing: {decreasing}", report.median_deviation));
    Ok(())
}

/// `count` random three-slot histories starting on populated `X` labels.
pub fn random_three_slot_histories(events: &ProjectorSet, count: usize, tau: f64, seed: u64) -> Result<Vec<HistorySpec>> {
    let populated: Vec<EventLabel> = events
        .labels
        .iter()
        .zip(&events.projectors)
        .filter(|(l, p)| p.rank > 0 && **l != EventLabel::Complement)
        .map(|(l, _)| *l)
        .collect();
    if populated.is_empty() {
        return Err(Error::InvalidInput("no populated event labels".into()));
    }
    // a stream no per-sample estimator stream will collide with
    let mut rng = CounterRng::stream(seed, u64::MAX);
    let mut pick = || populated[(rng.next_f64() * populated.len() as f64) as usize % populated.len()];
    (0..count)
        .map(|_| HistorySpec::from_first_label(vec![Slot::Measured(pick()), Slot::Measured(pick()), Slot::Measured(pick())], tau))
        .collect()
}

fn run_estimate(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.config;
    let seed = cfg.seed.expect("validated");
    let params = cfg.model_params();
    let sys = ctx.timed("setup", || LadderSystem::build(&params, cfg.propagation))?;
    let tau = cfg.tau_abs();
    let u = sys.propagator(tau)?;
    let specs = random_three_slot_histories(&sys.events, cfg.histories(), tau, seed)?;
    let samples = cfg.samples();
    let rows: Vec<(String, Option<f64>, f64, f64)> = ctx.timed("estimate", || {
        specs
            .iter()
            .enumerate()
            .map(|(k, spec)| {
                let est = estimate_history_probability(spec, &sys.events, u.as_ref(), samples, seed.wrapping_add(k as u64 + 1))?;
                let exact = if sys.spectrum.is_some() {
                    Some(history_probability(spec, u.as_ref(), &sys.events)?.raw_probability)
                } else {
                    None
                };
                Ok((crate::histories::format_path(&spec.slots), exact, est.mean, est.stderr))
            })
            .collect()
    })?;
    ctx.out.write("estimate.csv", |w| {
        writeln!(w, "history,exact,estimate,stderr")?;
        rows.iter().try_for_each(|(h, e, m, s)| {
            writeln!(w, "{h},{},{m},{s}", e.map(|v| v.to_string()).unwrap_or_default())
        })
    })?;
    let compared: Vec<f64> =
        rows.iter().filter_map(|(_, e, m, s)| e.map(|e| if *s > 0.0 { (m - e).abs() / s } else { (m - e).abs() / 1e-300 })).collect();
    if !compared.is_empty() {
        let within = compared.iter().filter(|z| **z <= 3.0).count();
        ctx.line(format!("{within} of {} estimates within 3 stderr of the exact value", compared.len()));
    }
    ctx.line(format!("N = {}, dim {}, {} histories x {samples} samples, tau = {tau}", params.num_spins(), sys.dim(), rows.len()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_fields(c: &ExperimentConfig) -> Vec<String> {
        validate(c).into_iter().map(|d| format!("{}: {}", d.field, d.reason)).collect()
    }

    #[test]
    fn diagnostics_name_fields() {
        let mut c = ExperimentConfig::new(ExperimentKind::Relax);
        c.num_spins = Some(13);
        assert!(diag_fields(&c).iter().any(|d| d.contains("N must be a multiple of 4")));

        let mut c = ExperimentConfig::new(ExperimentKind::Relax);
        c.model.energy_window = [0.6, -1.2];
        assert!(diag_fields(&c).iter().any(|d| d.starts_with("model.energy_window")));

        let c = ExperimentConfig::new(ExperimentKind::HaarMarkov);
        assert!(diag_fields(&c).iter().any(|d| d.starts_with("seed")));

        let mut c = ExperimentConfig::new(ExperimentKind::SizeScaling);
        c.sizes = vec![12, 14];
        assert_eq!(diag_fields(&c), vec!["sizes: N must be a multiple of 4 (got 14)".to_string()]);

        assert!(validate(&ExperimentConfig::new(ExperimentKind::TauSweep)).is_empty());
        assert!(diag_fields(&ExperimentConfig::default()).iter().any(|d| d.starts_with("experiment")));
    }

    #[test]
    fn config_round_trips_and_reads_manifests() {
        let text = r#"{"experiment": "tau_sweep", "model": {"n": 2, "beta": 0.3}, "taus": [0.1, 0.2]}"#;
        let c = ExperimentConfig::from_json_str(text).unwrap();
        assert_eq!(c.kind(), Some(ExperimentKind::TauSweep));
        assert_eq!(c.model.beta, 0.3);
        assert_eq!(c.model.delta, 1.0);
        let wrapped = format!(r#"{{"config_sha256": "x", "config": {}}}"#, serde_json::to_string(&c).unwrap());
        let back = ExperimentConfig::from_json_str(&wrapped).unwrap();
        assert_eq!(back.hash(), c.hash());
        assert!(ExperimentConfig::from_json_str(r#"{"experiment": "relax", "bogus": 1}"#).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(RunError::from(Error::DenseThresholdExceeded { dim: 10, threshold: 5 }).exit_code(), 3);
        assert_eq!(RunError::Config(vec![]).exit_code(), 2);
        assert_eq!(RunError::from(Error::InvalidInput("x".into())).exit_code(), 1);
    }

    #[test]
    fn relax_run_is_reproducible() {
        let dir = std::env::temp_dir().join(format!("spinhist-relax-{}", std::process::id()));
        let mut c = ExperimentConfig::new(ExperimentKind::Relax);
        c.model.n = 2;
        c.t_points = 11;
        c.output_dir = Some(dir.clone());
        let first = run(&c).unwrap();
        let csv = fs::read_to_string(dir.join("relaxation.csv")).unwrap();
        assert_eq!(csv.lines().count(), 12);
        assert!(csv.starts_with("t,P(-4),P(-2),P(0),P(2),P(4),leakage"));
        run(&c).unwrap();
        assert_eq!(fs::read_to_string(dir.join("relaxation.csv")).unwrap(), csv);
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
        let listed: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
        for f in &first.files {
            assert!(listed.contains(&f.as_str()));
            assert!(dir.join(f).exists());
        }
        let _ = fs::remove_dir_all(&dir);
    }
}
