use clap::{Args, Parser, Subcommand, ValueEnum};
use pimlosc::checkpoint::{load_oscillator, save_oscillator, write_oscillator_history};
use pimlosc::metrics::evaluate;
use pimlosc::oscillator::{rollout, train_sequence, CellKind, OscillatorModel};
use pimlosc::pde::Benchmark;
use pimlosc_harness::config::{ExperimentConfig, CACHE_ENV};
use pimlosc_harness::pipeline::{
    pinn_for, read_grid, read_records, reference_grid, run_experiment, training_grid, write_grid, InStage, Stage,
    StageError, StageResult, RECORDS_FILE,
};
use pimlosc_harness::report::generate_report;
use pimlosc_harness::sweep::{run_sweep, SweepAxis};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pimlosc", version, about = "Physics-informed networks with neural-oscillator extrapolation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Benchmark whose defaults apply when no config file is given.
    #[arg(long, global = true)]
    benchmark: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Cache root for reference solutions and trained networks.
    #[arg(long, global = true, env = CACHE_ENV)]
    cache: Option<PathBuf>,
    /// Extra `key = value` overrides, applied in order.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Cells,
    DeltaT,
    EpsilonGamma,
    TestNu,
}

#[derive(Subcommand)]
enum Command {
    /// Reference, network, oscillator, rollout and metrics in one go.
    Run,
    /// One run per axis point and replicate, aggregated to mean/std.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated points; `(ε, γ)` pairs are written `eps:gamma`.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Tables and figures from the run records.
    Report {
        /// Record file; defaults to the one in the output directory.
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Solve (or load) the reference grid and write it as CSV.
    SolveReference {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train (or load) the network and write its training-window grid.
    TrainPinn {
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Fit an oscillator to a training grid under teacher forcing.
    TrainOscillator {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Extrapolate a trained oscillator beyond its seed grid.
    Rollout {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        /// Levels to predict; defaults to a quarter of the seed levels.
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a prediction grid against a reference grid.
    Evaluate {
        #[arg(long)]
        prediction: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
}

fn load_config(g: &Global) -> StageResult<ExperimentConfig> {
    let mut cfg = match (&g.config, &g.benchmark) {
        (Some(path), _) => ExperimentConfig::from_file(path).stage(Stage::Config)?,
        (None, Some(name)) => ExperimentConfig::defaults(Benchmark::from_name(name).stage(Stage::Config)?),
        (None, None) => ExperimentConfig::defaults(Benchmark::Burgers),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.paths.out = out.clone();
    }
    if let Some(cache) = &g.cache {
        cfg.paths.cache = cache.clone();
    }
    for o in &g.overrides {
        cfg.set(o).stage(Stage::Config)?;
    }
    cfg.validate().stage(Stage::Config)?;
    Ok(cfg)
}

fn parse_axis(axis: Axis, values: &[String]) -> StageResult<SweepAxis> {
    let num = |s: &str| s.trim().parse::<f64>().map_err(|e| format!("'{s}': {e}"));
    let parsed = match axis {
        Axis::Cells => values
            .iter()
            .map(|s| CellKind::from_name(s.trim()).map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()
            .map(SweepAxis::Cells),
        Axis::DeltaT => values.iter().map(|s| num(s)).collect::<Result<_, _>>().map(SweepAxis::DeltaT),
        Axis::TestNu => values.iter().map(|s| num(s)).collect::<Result<_, _>>().map(SweepAxis::TestNu),
        Axis::EpsilonGamma => values
            .iter()
            .map(|s| {
                let (e, g) = s.split_once(':').ok_or_else(|| format!("'{s}' is not eps:gamma"))?;
                Ok((num(e)?, num(g)?))
            })
            .collect::<Result<_, String>>()
            .map(SweepAxis::EpsilonGamma),
    };
    parsed.stage(Stage::Config)
}

fn print_json(value: &impl serde::Serialize) -> StageResult<()> {
    println!("{}", serde_json::to_string_pretty(value).stage(Stage::Output)?);
    Ok(())
}

fn execute(cli: Cli) -> StageResult<()> {
    let cfg = load_config(&cli.global)?;
    std::fs::create_dir_all(&cfg.paths.out).stage(Stage::Output)?;
    match cli.command {
        Command::Run => {
            let record = run_experiment(&cfg)?;
            println!("{}", record.run_id);
            print_json(&record.metrics)
        }
        Command::Sweep { axis, values } => {
            let report = run_sweep(&cfg, &parse_axis(axis, &values)?)?;
            for row in &report.rows {
                println!(
                    "{:<28} n={} rel_l2 {:.4e} ± {:.2e}",
                    row.point, row.replicates, row.mean[0], row.std[0]
                );
            }
            Ok(())
        }
        Command::Report { records, dir } => {
            let path = records.unwrap_or_else(|| cfg.paths.out.join(RECORDS_FILE));
            let records = read_records(&path)?;
            let files = generate_report(&records, &dir.unwrap_or_else(|| cfg.paths.out.join("report")))?;
            println!("{}", files.metrics_csv.display());
            Ok(())
        }
        Command::SolveReference { output } => {
            let nu = if cfg.benchmark == Benchmark::BurgersParametric { Some(cfg.parametric.test_nu) } else { cfg.nu };
            let (grid, cached) = reference_grid(&cfg, nu)?;
            let path = match output {
                Some(p) => {
                    write_grid(&p, &grid)?;
                    p
                }
                None => cached,
            };
            println!("{}", path.display());
            Ok(())
        }
        Command::TrainPinn { grid } => {
            let nu = if cfg.benchmark == Benchmark::BurgersParametric { Some(cfg.parametric.test_nu) } else { cfg.nu };
            let pinn = pinn_for(&cfg, nu)?;
            let g = training_grid(&cfg, nu, &pinn.model)?;
            let path = grid.unwrap_or_else(|| cfg.paths.out.join("training_grid.csv"));
            write_grid(&path, &g)?;
            println!("{}", pinn.checkpoint.display());
            println!("{}", path.display());
            Ok(())
        }
        Command::TrainOscillator { grid, model, history } => {
            let g = read_grid(&grid).stage(Stage::InferGrid)?;
            let mut m = OscillatorModel::new(cfg.oscillator_config(g.width())).stage(Stage::TrainOscillator)?;
            let losses = train_sequence(&mut m, &g).stage(Stage::TrainOscillator)?;
            save_oscillator(&model, &m).stage(Stage::Output)?;
            if let Some(h) = history {
                let f = std::fs::File::create(&h).stage(Stage::Output)?;
                write_oscillator_history(std::io::BufWriter::new(f), &losses).stage(Stage::Output)?;
            }
            if let Some(last) = losses.last() {
                println!("final loss {last:.6e}");
            }
            Ok(())
        }
        Command::Rollout { model, grid, horizon, output } => {
            let m = load_oscillator(&model).stage(Stage::Rollout)?;
            let seed = read_grid(&grid).stage(Stage::Rollout)?;
            let horizon = horizon.unwrap_or(seed.k_t() / 4);
            let pred = rollout(&m, &seed, horizon, cfg.rollout_options()).stage(Stage::Rollout)?;
            write_grid(&output, &pred)
        }
        Command::Evaluate { prediction, reference } => {
            let pred = read_grid(&prediction).stage(Stage::Evaluate)?;
            let mut reference = read_grid(&reference).stage(Stage::Evaluate)?;
            if reference.k_t() > pred.k_t() {
                let start = reference.times.iter().position(|&t| t == pred.times[0]).ok_or_else(|| StageError {
                    stage: Stage::Evaluate,
                    message: format!("reference has no level at t = {}", pred.times[0]),
                })?;
                if start + pred.k_t() > reference.k_t() {
                    return Err(StageError {
                        stage: Stage::Evaluate,
                        message: "prediction runs past the end of the reference".into(),
                    });
                }
                reference = reference.slice_levels(start, pred.k_t());
            }
            print_json(&evaluate(&pred, &reference).stage(Stage::Evaluate)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.stage.exit_code() as u8)
        }
    }
}
