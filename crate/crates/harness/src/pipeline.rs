//! End-to-end runs: reference → PINN → training grid → oscillator →
//! rollout → metrics, with every artifact written to disk.

use crate::config::ExperimentConfig;
use pimlosc::checkpoint::{load_mlp, save_mlp, save_oscillator, write_oscillator_history, write_pinn_history};
use pimlosc::grid::GridSolution;
use pimlosc::metrics::{evaluate, EvaluationReport};
use pimlosc::oscillator::{rollout, teacher_forced_outputs, train_sequences, OscillatorModel};
use pimlosc::pde::{make_benchmark, sample_collocation, Benchmark, BenchmarkOverrides, DomainSpec, PdeSpec};
use pimlosc::pinn::{infer_grid, pinn_loss, train_pinn, MlpModel, PinnLossReport};
use pimlosc::reference::{cache_path, solve_cached, ReferenceRequest};
use pimlosc::Array;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Config,
    Reference,
    TrainPinn,
    InferGrid,
    TrainOscillator,
    Rollout,
    Evaluate,
    Report,
    Output,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Reference => "solve-reference",
            Stage::TrainPinn => "train-pinn",
            Stage::InferGrid => "infer-grid",
            Stage::TrainOscillator => "train-oscillator",
            Stage::Rollout => "rollout",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
            Stage::Output => "write-output",
        }
    }

    /// Process exit code for a failure in this stage.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Reference => 10,
            Stage::TrainPinn => 11,
            Stage::InferGrid => 12,
            Stage::TrainOscillator => 13,
            Stage::Rollout => 14,
            Stage::Evaluate => 15,
            Stage::Report => 16,
            Stage::Output => 17,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {message}")]
pub struct StageError {
    pub stage: Stage,
    pub message: String,
}

pub type StageResult<T> = std::result::Result<T, StageError>;

pub trait InStage<T> {
    fn stage(self, stage: Stage) -> StageResult<T>;
}

impl<T, E: fmt::Display> InStage<T> for std::result::Result<T, E> {
    fn stage(self, stage: Stage) -> StageResult<T> {
        self.map_err(|e| StageError {
            stage,
            message: e.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub pinn_checkpoint: PathBuf,
    pub pinn_history: PathBuf,
    pub training_grid: PathBuf,
    pub oscillator_checkpoint: PathBuf,
    pub oscillator_history: PathBuf,
    pub rollout_grid: PathBuf,
    pub reference_grid: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub code_version: String,
    pub config: ExperimentConfig,
    /// Held-out viscosity of a parametric run.
    pub test_nu: Option<f64>,
    pub artifacts: Artifacts,
    /// Scores over the extrapolation window.
    pub metrics: EvaluationReport,
    /// Teacher-forced fit over the training window, when requested.
    pub training_metrics: Option<EvaluationReport>,
    pub pinn_final_loss: PinnLossReport,
    pub oscillator_final_loss: Option<f64>,
    pub wall_seconds: BTreeMap<String, f64>,
}

fn digest_hex(value: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    let hash = Sha256::digest(&bytes);
    hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn problem(benchmark: Benchmark, nu: Option<f64>) -> StageResult<(PdeSpec, DomainSpec)> {
    make_benchmark(benchmark, &BenchmarkOverrides { nu, t_test_end: None }).stage(Stage::Config)
}

pub fn reference_request(cfg: &ExperimentConfig, nu: Option<f64>) -> StageResult<ReferenceRequest> {
    let mut req =
        ReferenceRequest::for_windows(cfg.benchmark, nu, cfg.grid.k_x, cfg.grid.k_t, cfg.grid.horizon()).stage(Stage::Config)?;
    req.solver = cfg.reference;
    Ok(req)
}

/// The full-window reference grid, from the cache when available.
pub fn reference_grid(cfg: &ExperimentConfig, nu: Option<f64>) -> StageResult<(GridSolution, PathBuf)> {
    let req = reference_request(cfg, nu)?;
    let dir = cfg.paths.cache.join("reference");
    let grid = solve_cached(&req, Some(&dir)).stage(Stage::Reference)?;
    Ok((grid, cache_path(&req, &dir)))
}

/// A trained (or cached) physics-informed network.
#[derive(Clone, Debug)]
pub struct PinnArtifact {
    pub model: MlpModel,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub final_loss: PinnLossReport,
}

#[derive(Serialize)]
struct PinnKey<'a> {
    benchmark: Benchmark,
    nu: Option<f64>,
    pinn: &'a crate::config::PinnSection,
    seed: u64,
    version: &'a str,
}

pub fn pinn_key(cfg: &ExperimentConfig, nu: Option<f64>) -> String {
    let key = PinnKey {
        benchmark: cfg.benchmark,
        nu,
        pinn: &cfg.pinn,
        seed: cfg.pinn_seed(),
        version: env!("CARGO_PKG_VERSION"),
    };
    format!("{}_{}", cfg.benchmark.name(), digest_hex(&key))
}

/// Trains the network for `(cfg, nu)` unless the cache already holds it.
pub fn pinn_for(cfg: &ExperimentConfig, nu: Option<f64>) -> StageResult<PinnArtifact> {
    let (spec, domain) = problem(cfg.benchmark, nu)?;
    let dir = cfg.paths.cache.join("pinn");
    let key = pinn_key(cfg, nu);
    let checkpoint = dir.join(format!("{key}.ckpt"));
    let history = dir.join(format!("{key}_history.csv"));
    let summary = dir.join(format!("{key}.json"));
    if checkpoint.exists() && summary.exists() && history.exists() {
        let (model, _) = load_mlp(&checkpoint).stage(Stage::TrainPinn)?;
        let text = fs::read_to_string(&summary).stage(Stage::TrainPinn)?;
        let final_loss = serde_json::from_str(&text).stage(Stage::TrainPinn)?;
        log::info!("PINN cache hit {key}");
        return Ok(PinnArtifact {
            model,
            checkpoint,
            history,
            final_loss,
        });
    }
    let seed = cfg.pinn_seed();
    let colloc = sample_collocation(&spec, &domain, cfg.pinn.counts(), seed).stage(Stage::TrainPinn)?;
    let mut model = MlpModel::new(&MlpModel::architecture(&cfg.pinn.hidden, spec.n_channels), seed).stage(Stage::TrainPinn)?;
    log::info!("training PINN {key} ({} epochs)", cfg.pinn.train_config().total_epochs());
    let outcome = train_pinn(&mut model, &spec, &colloc, &cfg.pinn.train_config()).stage(Stage::TrainPinn)?;
    let final_loss = pinn_loss(&model, &spec, &colloc).stage(Stage::TrainPinn)?;
    log::info!(
        "PINN {key} final loss {:.3e} ({} fallback steps)",
        final_loss.total,
        outcome.fallback_steps
    );
    fs::create_dir_all(&dir).stage(Stage::Output)?;
    write_atomically(&history, |w| write_pinn_history(w, &outcome.history).map_err(io_error))?;
    write_atomically(&summary, |w| {
        serde_json::to_writer_pretty(&mut *w, &final_loss).map_err(io_error)
    })?;
    let tmp = checkpoint.with_extension("ckpt.tmp");
    save_mlp(&tmp, &model, seed).stage(Stage::Output)?;
    fs::rename(&tmp, &checkpoint).stage(Stage::Output)?;
    Ok(PinnArtifact {
        model,
        checkpoint,
        history,
        final_loss,
    })
}

fn io_error(e: impl fmt::Display) -> std::io::Error {
    std::io::Error::other(e.to_string())
}

fn write_atomically(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> StageResult<()> {
    let tmp = path.with_extension("tmp");
    let mut w = BufWriter::new(fs::File::create(&tmp).stage(Stage::Output)?);
    f(&mut w).stage(Stage::Output)?;
    w.flush().stage(Stage::Output)?;
    drop(w);
    fs::rename(&tmp, path).stage(Stage::Output)
}

pub fn write_grid(path: &Path, grid: &GridSolution) -> StageResult<()> {
    write_atomically(path, |w| grid.write_csv(w).map_err(io_error))
}

pub fn read_grid(path: &Path) -> std::result::Result<GridSolution, pimlosc::Error> {
    GridSolution::read_csv(std::io::BufReader::new(fs::File::open(path)?))
}

/// PINN predictions on the `k_t × k_x` training grid over `[0, t_train_end]`.
pub fn training_grid(cfg: &ExperimentConfig, nu: Option<f64>, pinn: &MlpModel) -> StageResult<GridSolution> {
    let (_, domain) = problem(cfg.benchmark, nu)?;
    infer_grid(pinn, &domain, cfg.grid.k_t, cfg.grid.k_x, (0.0, domain.t_train_end)).stage(Stage::InferGrid)
}

/// Identifies the experiment independently of where it is cached or written.
pub fn run_id(cfg: &ExperimentConfig, test_nu: Option<f64>) -> String {
    let mut key = cfg.clone();
    key.paths.cache = PathBuf::new();
    key.paths.out = PathBuf::new();
    format!(
        "{}_{}_s{}_{}",
        cfg.benchmark.name(),
        cfg.oscillator.cell.name(),
        cfg.seed,
        digest_hex(&(key, test_nu))
    )
}

fn timed<T>(clock: &mut BTreeMap<String, f64>, stage: Stage, f: impl FnOnce() -> StageResult<T>) -> StageResult<T> {
    let start = Instant::now();
    let out = f()?;
    *clock.entry(stage.name().to_string()).or_default() += start.elapsed().as_secs_f64();
    Ok(out)
}

/// One full pipeline run. For the parametric benchmark the oscillator is
/// trained on every training viscosity and rolled out at the test one.
pub fn run_experiment(cfg: &ExperimentConfig) -> StageResult<RunRecord> {
    cfg.validate().stage(Stage::Config)?;
    let parametric = cfg.benchmark == Benchmark::BurgersParametric;
    let test_nu = if parametric { Some(cfg.parametric.test_nu) } else { cfg.nu };
    let id = run_id(cfg, test_nu);
    let dir = cfg.paths.out.join(&id);
    fs::create_dir_all(&dir).stage(Stage::Output)?;
    let mut clock = BTreeMap::new();

    let (reference, reference_path) = timed(&mut clock, Stage::Reference, || reference_grid(cfg, test_nu))?;

    let mut sequences = Vec::new();
    if parametric {
        for &nu in &cfg.parametric.train_nu {
            let pinn = timed(&mut clock, Stage::TrainPinn, || pinn_for(cfg, Some(nu)))?;
            sequences.push(timed(&mut clock, Stage::InferGrid, || training_grid(cfg, Some(nu), &pinn.model))?);
        }
    }
    let pinn = timed(&mut clock, Stage::TrainPinn, || pinn_for(cfg, test_nu))?;
    let seed_grid = timed(&mut clock, Stage::InferGrid, || training_grid(cfg, test_nu, &pinn.model))?;
    if !parametric {
        sequences.push(seed_grid.clone());
    }
    let training_path = dir.join("training_grid.csv");
    write_grid(&training_path, &seed_grid)?;

    let osc_cfg = cfg.oscillator_config(seed_grid.width());
    let mut model = OscillatorModel::new(osc_cfg).stage(Stage::TrainOscillator)?;
    let history = timed(&mut clock, Stage::TrainOscillator, || {
        log::info!("training {} on {} sequence(s), {} epochs", osc_cfg.kind.name(), sequences.len(), osc_cfg.epochs);
        train_sequences(&mut model, &sequences).stage(Stage::TrainOscillator)
    })?;
    let osc_ckpt = dir.join("oscillator.ckpt");
    save_oscillator(&osc_ckpt, &model).stage(Stage::Output)?;
    let osc_hist = dir.join("oscillator_history.csv");
    write_atomically(&osc_hist, |w| write_oscillator_history(w, &history).map_err(io_error))?;

    let horizon = cfg.grid.horizon();
    let predicted = timed(&mut clock, Stage::Rollout, || {
        rollout(&model, &seed_grid, horizon, cfg.rollout_options()).stage(Stage::Rollout)
    })?;
    let rollout_path = dir.join("rollout.csv");
    write_grid(&rollout_path, &predicted)?;

    let (metrics, training_metrics) = timed(&mut clock, Stage::Evaluate, || {
        let target = reference.slice_levels(cfg.grid.k_t, horizon);
        let metrics = evaluate(&predicted, &target).stage(Stage::Evaluate)?;
        let training_metrics = if cfg.training_metrics {
            Some(teacher_forced_metrics(&model, &seed_grid, &reference, cfg.grid.k_t)?)
        } else {
            None
        };
        Ok((metrics, training_metrics))
    })?;
    log::info!(
        "{id}: relative L2 on the extrapolation window {:.4e}",
        metrics.primary.relative_l2
    );

    let record = RunRecord {
        run_id: id,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        test_nu: if parametric { test_nu } else { None },
        artifacts: Artifacts {
            pinn_checkpoint: pinn.checkpoint,
            pinn_history: pinn.history,
            training_grid: training_path,
            oscillator_checkpoint: osc_ckpt,
            oscillator_history: osc_hist,
            rollout_grid: rollout_path,
            reference_grid: reference_path,
        },
        metrics,
        training_metrics,
        pinn_final_loss: pinn.final_loss,
        oscillator_final_loss: history.last().copied(),
        wall_seconds: clock,
    };
    write_atomically(&dir.join("record.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &record).map_err(io_error)
    })?;
    append_record(&cfg.paths.out, &record)?;
    Ok(record)
}

/// Readouts for levels `1..k_t` under teacher forcing, scored against the
/// reference on the same levels.
fn teacher_forced_metrics(
    model: &OscillatorModel,
    seed: &GridSolution,
    reference: &GridSolution,
    k_t: usize,
) -> StageResult<EvaluationReport> {
    let out: Array = teacher_forced_outputs(model, seed).stage(Stage::Evaluate)?;
    let pred = GridSolution::new(seed.times[1..].to_vec(), seed.xs.clone(), seed.n_channels, out).stage(Stage::Evaluate)?;
    let target = reference.slice_levels(1, k_t - 1);
    evaluate(&pred, &target).stage(Stage::Evaluate)
}

pub const RECORDS_FILE: &str = "runs.jsonl";

static RECORD_LOCK: Mutex<()> = Mutex::new(());

fn append_record(out: &Path, record: &RunRecord) -> StageResult<()> {
    let line = serde_json::to_string(record).stage(Stage::Output)? + "\n";
    let _guard = RECORD_LOCK.lock().unwrap_or_else(|p| p.into_inner());
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join(RECORDS_FILE))
        .stage(Stage::Output)?;
    f.write_all(line.as_bytes()).stage(Stage::Output)
}

pub fn read_records(path: &Path) -> StageResult<Vec<RunRecord>> {
    let text = fs::read_to_string(path).stage(Stage::Report)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StageError {
                stage: Stage::Report,
                message: format!("{}: record {}: {e}", path.display(), i + 1),
            })
        })
        .collect()
}
