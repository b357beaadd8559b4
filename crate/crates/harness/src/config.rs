//! Experiment configuration: a flat TOML file of dotted keys layered over
//! per-benchmark defaults.

use pimlosc::oscillator::{CellKind, FirstInput, OscillatorConfig, RolloutOptions, Warmup};
use pimlosc::pde::{Benchmark, CollocationCounts};
use pimlosc::pinn::{default_hidden, LossWeights, OptimizerPhase, PinnTrainConfig};
use pimlosc::reference::SolverParams;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable that replaces the default cache root.
pub const CACHE_ENV: &str = "PIMLOSC_CACHE";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid TOML: {0}")]
    Parse(String),
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("config key '{key}': {msg}")]
    Value { key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

type CResult<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinnSection {
    pub hidden: Vec<usize>,
    pub residual_points: usize,
    /// Initial plus boundary points.
    pub boundary_points: usize,
    pub adam_lr: f64,
    pub adam_epochs: usize,
    pub lbfgs_epochs: usize,
    pub weights: LossWeights,
    pub plateau_stop: bool,
    /// Fixed network seed; when absent the run seed is used.
    pub seed: Option<u64>,
}

impl PinnSection {
    pub fn train_config(&self) -> PinnTrainConfig {
        let mut phases = Vec::new();
        if self.adam_epochs > 0 {
            phases.push(OptimizerPhase::Adam {
                lr: self.adam_lr,
                epochs: self.adam_epochs,
            });
        }
        if self.lbfgs_epochs > 0 {
            phases.push(OptimizerPhase::Lbfgs {
                epochs: self.lbfgs_epochs,
            });
        }
        PinnTrainConfig {
            phases,
            weights: self.weights,
            plateau_stop: self.plateau_stop,
        }
    }

    pub fn counts(&self) -> CollocationCounts {
        CollocationCounts::from_totals(self.residual_points, self.boundary_points)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OscillatorSection {
    pub cell: CellKind,
    pub hidden: usize,
    pub delta_t: f64,
    pub gamma: f64,
    pub epsilon: f64,
    /// Learning rate; when absent the cell's default applies.
    pub lr: Option<f64>,
    pub epochs: usize,
    pub explicit_damping: bool,
    pub warmup: Warmup,
    pub first_input: FirstInput,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSection {
    pub k_t: usize,
    pub k_x: usize,
}

impl GridSection {
    /// Extrapolation levels: a quarter of the training levels.
    pub fn horizon(&self) -> usize {
        self.k_t / 4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathsSection {
    pub cache: PathBuf,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParametricSection {
    pub train_nu: Vec<f64>,
    pub test_nu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub benchmark: Benchmark,
    /// Burgers viscosity override.
    pub nu: Option<f64>,
    pub seed: u64,
    pub replicates: usize,
    pub pinn: PinnSection,
    pub oscillator: OscillatorSection,
    pub grid: GridSection,
    pub reference: SolverParams,
    pub paths: PathsSection,
    pub parametric: ParametricSection,
    /// Also score the teacher-forced fit over the training window.
    pub training_metrics: bool,
}

fn default_cache() -> PathBuf {
    std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("cache"))
}

impl ExperimentConfig {
    pub fn defaults(benchmark: Benchmark) -> Self {
        let counts = CollocationCounts::default_for(benchmark);
        let train = PinnTrainConfig::default_for(benchmark);
        let (mut adam_lr, mut adam_epochs, mut lbfgs_epochs) = (1e-3, 0, 0);
        for phase in &train.phases {
            match *phase {
                OptimizerPhase::Adam { lr, epochs } => {
                    adam_lr = lr;
                    adam_epochs = epochs;
                }
                OptimizerPhase::Lbfgs { epochs } => lbfgs_epochs = epochs,
            }
        }
        let (k_t, k_x) = match benchmark {
            Benchmark::AllenCahn => (80, 201),
            Benchmark::Schrodinger => (160, 256),
            _ => (80, 256),
        };
        let epochs = match benchmark {
            Benchmark::Schrodinger => 30_000,
            Benchmark::EulerBernoulli => 200_000,
            _ => 20_000,
        };
        ExperimentConfig {
            benchmark,
            nu: None,
            seed: 0,
            replicates: 1,
            pinn: PinnSection {
                hidden: default_hidden(benchmark),
                residual_points: counts.residual,
                boundary_points: counts.initial + 2 * counts.boundary_each,
                adam_lr,
                adam_epochs,
                lbfgs_epochs,
                weights: LossWeights::default(),
                plateau_stop: false,
                seed: None,
            },
            oscillator: OscillatorSection {
                cell: CellKind::Lem,
                hidden: 32,
                delta_t: 0.01,
                gamma: 1.0,
                epsilon: 0.01,
                lr: None,
                epochs,
                explicit_damping: false,
                warmup: Warmup::TrainingSequence,
                first_input: FirstInput::FinalTraining,
            },
            grid: GridSection { k_t, k_x },
            reference: SolverParams::default_for(benchmark),
            paths: PathsSection {
                cache: default_cache(),
                out: PathBuf::from("runs"),
            },
            parametric: ParametricSection {
                train_nu: vec![0.005, 0.0125, 0.02, 0.0275, 0.035],
                test_nu: 0.05,
            },
            training_metrics: false,
        }
    }

    pub fn from_file(path: &Path) -> CResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Parses a config; `benchmark` selects the defaults every other key
    /// overrides.
    pub fn from_toml(text: &str) -> CResult<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let mut flat = BTreeMap::new();
        flatten("", &toml::Value::Table(table), &mut flat);
        let benchmark = match flat.remove("benchmark") {
            Some(v) => {
                let name = v.as_str().ok_or_else(|| value_err("benchmark", "expected a string"))?;
                Benchmark::from_name(name).map_err(|e| value_err("benchmark", e))?
            }
            None => Benchmark::Burgers,
        };
        let mut cfg = Self::defaults(benchmark);
        for (key, value) in &flat {
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` override, e.g. from `--set`. A value that
    /// is not valid TOML is taken as a bare string (`oscillator.cell=lem`).
    pub fn set(&mut self, assignment: &str) -> CResult<()> {
        let table: toml::Table = assignment.parse().or_else(|e: toml::de::Error| match assignment.split_once('=') {
            Some((k, v)) if !v.trim().is_empty() => Ok(toml::Table::from_iter([(
                k.trim().to_string(),
                toml::Value::String(v.trim().to_string()),
            )])),
            _ => Err(ConfigError::Parse(format!("'{assignment}': {e}"))),
        })?;
        let mut flat = BTreeMap::new();
        flatten("", &toml::Value::Table(table), &mut flat);
        for (key, value) in &flat {
            if key == "benchmark" {
                return Err(value_err(key, "the benchmark can only be chosen in the config file"));
            }
            self.apply(key, value)?;
        }
        self.validate()
    }

    fn apply(&mut self, key: &str, v: &toml::Value) -> CResult<()> {
        match key {
            "seed" => self.seed = as_u64(key, v)?,
            "replicates" => self.replicates = as_usize(key, v)?,
            "nu" => self.nu = Some(as_f64(key, v)?),
            "training_metrics" => self.training_metrics = as_bool(key, v)?,
            "pinn.hidden" => self.pinn.hidden = as_usize_list(key, v)?,
            "pinn.residual_points" => self.pinn.residual_points = as_usize(key, v)?,
            "pinn.boundary_points" => self.pinn.boundary_points = as_usize(key, v)?,
            "pinn.adam_lr" => self.pinn.adam_lr = as_f64(key, v)?,
            "pinn.adam_epochs" => self.pinn.adam_epochs = as_usize(key, v)?,
            "pinn.lbfgs_epochs" => self.pinn.lbfgs_epochs = as_usize(key, v)?,
            "pinn.plateau_stop" => self.pinn.plateau_stop = as_bool(key, v)?,
            "pinn.seed" => self.pinn.seed = Some(as_u64(key, v)?),
            "pinn.weights.residual" => self.pinn.weights.residual = as_f64(key, v)?,
            "pinn.weights.ic" => self.pinn.weights.ic = as_f64(key, v)?,
            "pinn.weights.bc" => self.pinn.weights.bc = as_f64(key, v)?,
            "oscillator.cell" => {
                let name = v.as_str().ok_or_else(|| value_err(key, "expected a string"))?;
                self.oscillator.cell = CellKind::from_name(name).map_err(|e| value_err(key, e))?;
            }
            "oscillator.hidden" => self.oscillator.hidden = as_usize(key, v)?,
            "oscillator.delta_t" => self.oscillator.delta_t = as_f64(key, v)?,
            "oscillator.gamma" => self.oscillator.gamma = as_f64(key, v)?,
            "oscillator.epsilon" => self.oscillator.epsilon = as_f64(key, v)?,
            "oscillator.lr" => self.oscillator.lr = Some(as_f64(key, v)?),
            "oscillator.epochs" => self.oscillator.epochs = as_usize(key, v)?,
            "oscillator.explicit_damping" => self.oscillator.explicit_damping = as_bool(key, v)?,
            "oscillator.warmup" => {
                self.oscillator.warmup = match v.as_str() {
                    Some("training_sequence") => Warmup::TrainingSequence,
                    Some("cold") => Warmup::Cold,
                    _ => return Err(value_err(key, "expected \"training_sequence\" or \"cold\"")),
                }
            }
            "oscillator.first_input" => {
                self.oscillator.first_input = match v.as_str() {
                    Some("final_training") => FirstInput::FinalTraining,
                    Some("predicted") => FirstInput::Predicted,
                    _ => return Err(value_err(key, "expected \"final_training\" or \"predicted\"")),
                }
            }
            "grid.k_t" => self.grid.k_t = as_usize(key, v)?,
            "grid.k_x" => self.grid.k_x = as_usize(key, v)?,
            "reference.min_modes" => self.reference.min_modes = as_usize(key, v)?,
            "reference.dt_max" => self.reference.dt_max = as_f64(key, v)?,
            "paths.cache" => self.paths.cache = PathBuf::from(as_str(key, v)?),
            "paths.out" => self.paths.out = PathBuf::from(as_str(key, v)?),
            "parametric.train_nu" => {
                let list = v.as_array().ok_or_else(|| value_err(key, "expected an array"))?;
                self.parametric.train_nu = list.iter().map(|x| as_f64(key, x)).collect::<CResult<_>>()?;
            }
            "parametric.test_nu" => self.parametric.test_nu = as_f64(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> CResult<()> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.grid.k_t < 4 || self.grid.k_t % 4 != 0 {
            return bad(format!("grid.k_t = {} must be a positive multiple of 4 (4:1 split)", self.grid.k_t));
        }
        if self.grid.k_x < 2 {
            return bad(format!("grid.k_x = {} must be at least 2", self.grid.k_x));
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if self.pinn.hidden.is_empty() || self.pinn.hidden.contains(&0) {
            return bad(format!("pinn.hidden {:?} needs positive widths", self.pinn.hidden));
        }
        if self.pinn.residual_points == 0 || self.pinn.boundary_points < 4 {
            return bad("pinn needs residual points and at least 4 initial/boundary points".into());
        }
        if let Some(nu) = self.nu {
            if !(nu > 0.0) || !matches!(self.benchmark, Benchmark::Burgers | Benchmark::BurgersParametric) {
                return bad(format!("nu = {nu} needs a Burgers benchmark and a positive value"));
            }
        }
        if self.benchmark == Benchmark::BurgersParametric
            && (self.parametric.train_nu.is_empty()
                || self.parametric.train_nu.iter().chain([&self.parametric.test_nu]).any(|&v| !(v > 0.0)))
        {
            return bad("parametric study needs positive training and test viscosities".into());
        }
        self.oscillator_config(self.grid_width())
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    fn grid_width(&self) -> usize {
        let channels = if self.benchmark == Benchmark::Schrodinger { 2 } else { 1 };
        channels * self.grid.k_x
    }

    /// The learning rate actually used for the configured cell.
    pub fn oscillator_lr(&self) -> f64 {
        self.oscillator.lr.unwrap_or(match (self.benchmark, self.oscillator.cell) {
            (Benchmark::Schrodinger, CellKind::Lem) => 1e-2,
            (_, cell) => cell.default_lr(),
        })
    }

    pub fn oscillator_config(&self, d_in: usize) -> OscillatorConfig {
        let o = &self.oscillator;
        OscillatorConfig {
            kind: o.cell,
            d_in,
            hidden: o.hidden,
            delta_t: o.delta_t,
            gamma: o.gamma,
            epsilon: o.epsilon,
            explicit_damping: o.explicit_damping,
            lr: self.oscillator_lr(),
            epochs: o.epochs,
            seed: self.seed,
        }
    }

    pub fn rollout_options(&self) -> RolloutOptions {
        RolloutOptions {
            warmup: self.oscillator.warmup,
            first_input: self.oscillator.first_input,
        }
    }

    pub fn pinn_seed(&self) -> u64 {
        self.pinn.seed.unwrap_or(self.seed)
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, toml::Value>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn value_err(key: &str, msg: impl ToString) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        msg: msg.to_string(),
    }
}

fn as_f64(key: &str, v: &toml::Value) -> CResult<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(value_err(key, "expected a number")),
    }
}

fn as_u64(key: &str, v: &toml::Value) -> CResult<u64> {
    v.as_integer()
        .and_then(|i| u64::try_from(i).ok())
        .ok_or_else(|| value_err(key, "expected a non-negative integer"))
}

fn as_usize(key: &str, v: &toml::Value) -> CResult<usize> {
    as_u64(key, v).map(|i| i as usize)
}

fn as_bool(key: &str, v: &toml::Value) -> CResult<bool> {
    v.as_bool().ok_or_else(|| value_err(key, "expected true or false"))
}

fn as_str<'a>(key: &str, v: &'a toml::Value) -> CResult<&'a str> {
    v.as_str().ok_or_else(|| value_err(key, "expected a string"))
}

fn as_usize_list(key: &str, v: &toml::Value) -> CResult<Vec<usize>> {
    let list = v.as_array().ok_or_else(|| value_err(key, "expected an array"))?;
    list.iter().map(|x| as_usize(key, x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bare_config_gives_benchmark_defaults() {
        let c = ExperimentConfig::from_toml("benchmark = \"schrodinger\"").unwrap();
        assert_eq!((c.grid.k_t, c.grid.k_x), (160, 256));
        assert_eq!(c.oscillator.epochs, 30_000);
        assert_eq!(c.oscillator_lr(), 1e-2);
        assert_eq!(c.pinn.hidden, vec![100; 4]);
        assert_eq!(c.grid.horizon(), 40);
        let b = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(b.benchmark, Benchmark::Burgers);
        assert_eq!(b.pinn.lbfgs_epochs, 3500);
        assert_eq!(b.pinn.adam_epochs, 0);
        assert_eq!((b.pinn.residual_points, b.pinn.boundary_points), (1000, 600));
        assert_eq!(b.oscillator_lr(), 1e-3);
    }

    #[test]
    fn dotted_and_table_forms_agree() {
        let a = ExperimentConfig::from_toml("oscillator.delta_t = 0.3\noscillator.cell = \"gru\"").unwrap();
        let b = ExperimentConfig::from_toml("[oscillator]\ndelta_t = 0.3\ncell = \"gru\"").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.oscillator_lr(), 1e-2);
    }

    #[test]
    fn bad_keys_and_values_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml("oscillator.dt = 0.1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(ExperimentConfig::from_toml("oscillator.delta_t = 1.5").is_err());
        assert!(ExperimentConfig::from_toml("grid.k_t = 81").is_err());
        assert!(ExperimentConfig::from_toml("benchmark = \"heat\"").is_err());
        assert!(ExperimentConfig::from_toml("benchmark = \"allen_cahn\"\nnu = 0.1").is_err());
        assert!(ExperimentConfig::from_toml("seed = -1").is_err());
    }

    #[test]
    fn set_overrides_one_key() {
        let mut c = ExperimentConfig::defaults(Benchmark::Burgers);
        c.set("oscillator.epochs = 5").unwrap();
        assert_eq!(c.oscillator.epochs, 5);
        assert!(c.set("benchmark = \"schrodinger\"").is_err());
        c.set("oscillator.cell=gru").unwrap();
        assert_eq!(c.oscillator.cell, CellKind::Gru);
        assert!(c.set("oscillator.epochs=many").is_err());
        assert!(c.set("oscillator.epochs").is_err());
    }

    #[test]
    fn optimizer_phases_follow_epoch_counts() {
        let c = ExperimentConfig::defaults(Benchmark::AllenCahn);
        let t = c.pinn.train_config();
        assert_eq!(t.phases.len(), 2);
        assert_eq!(t.total_epochs(), 17_000);
        let mut z = c.clone();
        z.pinn.adam_epochs = 0;
        z.pinn.lbfgs_epochs = 0;
        assert!(z.pinn.train_config().phases.is_empty());
    }
}
