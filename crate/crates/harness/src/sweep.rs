//! Sweeps over cell kinds, Δt, (ε, γ) and held-out viscosity, with seed
//! replicates and mean/std aggregation.

use crate::config::ExperimentConfig;
use crate::pipeline::{pinn_for, pinn_key, run_experiment, InStage, RunRecord, Stage, StageError, StageResult};
use pimlosc::metrics::MetricSet;
use pimlosc::oscillator::CellKind;
use pimlosc::pde::Benchmark;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum SweepAxis {
    Cells(Vec<CellKind>),
    DeltaT(Vec<f64>),
    /// `(ε, γ)` pairs.
    EpsilonGamma(Vec<(f64, f64)>),
    /// Held-out viscosities of the parametric study.
    TestNu(Vec<f64>),
}

impl SweepAxis {
    pub fn len(&self) -> usize {
        match self {
            SweepAxis::Cells(v) => v.len(),
            SweepAxis::DeltaT(v) | SweepAxis::TestNu(v) => v.len(),
            SweepAxis::EpsilonGamma(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(label, config)` for every point.
    fn points(&self, base: &ExperimentConfig) -> StageResult<Vec<(String, ExperimentConfig)>> {
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let mut cfg = base.clone();
            let label = match self {
                SweepAxis::Cells(v) => {
                    cfg.oscillator.cell = v[i];
                    v[i].name().to_string()
                }
                SweepAxis::DeltaT(v) => {
                    cfg.oscillator.delta_t = v[i];
                    format!("delta_t={}", v[i])
                }
                SweepAxis::EpsilonGamma(v) => {
                    cfg.oscillator.epsilon = v[i].0;
                    cfg.oscillator.gamma = v[i].1;
                    format!("epsilon={},gamma={}", v[i].0, v[i].1)
                }
                SweepAxis::TestNu(v) => {
                    if cfg.benchmark != Benchmark::BurgersParametric {
                        return Err(StageError {
                            stage: Stage::Config,
                            message: "a viscosity sweep needs the burgers_parametric benchmark".into(),
                        });
                    }
                    cfg.parametric.test_nu = v[i];
                    format!("test_nu={}", v[i])
                }
            };
            cfg.validate().stage(Stage::Config)?;
            out.push((label, cfg));
        }
        Ok(out)
    }
}

/// Mean and sample standard deviation over replicates at one sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: String,
    pub replicates: usize,
    pub mean: [f64; 4],
    pub std: [f64; 4],
    pub run_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub records: Vec<RunRecord>,
}

impl SweepReport {
    pub fn row(&self, point: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.point == point)
    }

    /// Primary metrics of every record at `point`, in replicate order.
    pub fn metrics_at(&self, point: &str) -> Vec<MetricSet> {
        let Some(row) = self.row(point) else { return Vec::new() };
        row.run_ids
            .iter()
            .filter_map(|id| self.records.iter().find(|r| &r.run_id == id))
            .map(|r| r.metrics.primary)
            .collect()
    }
}

/// Replicate `r` of a point runs with seed `seed + r`.
pub fn expand_replicates(points: Vec<(String, ExperimentConfig)>) -> Vec<(String, ExperimentConfig)> {
    points
        .into_iter()
        .flat_map(|(label, cfg)| {
            (0..cfg.replicates as u64).map(move |r| {
                let mut c = cfg.clone();
                c.seed = cfg.seed + r;
                (label.clone(), c)
            })
        })
        .collect()
}

/// Trains each distinct network once before the runs that share it start.
fn prepare_pinns(runs: &[(String, ExperimentConfig)]) -> StageResult<()> {
    let mut unique: BTreeMap<String, (ExperimentConfig, Option<f64>)> = BTreeMap::new();
    for (_, cfg) in runs {
        let mut nus = Vec::new();
        if cfg.benchmark == Benchmark::BurgersParametric {
            nus.extend(cfg.parametric.train_nu.iter().map(|&v| Some(v)));
            nus.push(Some(cfg.parametric.test_nu));
        } else {
            nus.push(cfg.nu);
        }
        for nu in nus {
            unique.entry(pinn_key(cfg, nu)).or_insert_with(|| (cfg.clone(), nu));
        }
    }
    unique
        .into_par_iter()
        .map(|(_, (cfg, nu))| pinn_for(&cfg, nu).map(|_| ()))
        .collect()
}

pub fn run_sweep(base: &ExperimentConfig, axis: &SweepAxis) -> StageResult<SweepReport> {
    if axis.is_empty() {
        return Err(StageError {
            stage: Stage::Config,
            message: "sweep axis has no points".into(),
        });
    }
    let runs = expand_replicates(axis.points(base)?);
    prepare_pinns(&runs)?;
    let results: Vec<(String, RunRecord)> = runs
        .into_par_iter()
        .map(|(label, cfg)| run_experiment(&cfg).map(|r| (label, r)))
        .collect::<StageResult<_>>()?;
    let mut order: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for (label, rec) in &results {
        if !order.contains(label) {
            order.push(label.clone());
        }
        grouped.entry(label.clone()).or_default().push(rec);
    }
    let rows = order
        .iter()
        .map(|label| {
            let recs = &grouped[label];
            let values: Vec<[f64; 4]> = recs.iter().map(|r| r.metrics.primary.values()).collect();
            let (mean, std) = mean_std(&values);
            SweepRow {
                point: label.clone(),
                replicates: recs.len(),
                mean,
                std,
                run_ids: recs.iter().map(|r| r.run_id.clone()).collect(),
            }
        })
        .collect();
    let report = SweepReport {
        axis: axis.clone(),
        rows,
        records: results.into_iter().map(|(_, r)| r).collect(),
    };
    write_sweep_csv(&base.paths.out.join("sweep.csv"), &report)?;
    Ok(report)
}

fn mean_std(values: &[[f64; 4]]) -> ([f64; 4], [f64; 4]) {
    let n = values.len() as f64;
    let mut mean = [0.0; 4];
    let mut std = [0.0; 4];
    for j in 0..4 {
        mean[j] = values.iter().map(|v| v[j]).sum::<f64>() / n;
        if values.len() > 1 {
            std[j] = (values.iter().map(|v| (v[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        }
    }
    (mean, std)
}

pub fn write_sweep_csv(path: &Path, report: &SweepReport) -> StageResult<()> {
    let mut text = String::from("point,replicates");
    for name in MetricSet::NAMES {
        text.push_str(&format!(",{name}_mean,{name}_std"));
    }
    text.push('\n');
    for row in &report.rows {
        text.push_str(&format!("{},{}", row.point, row.replicates));
        for j in 0..4 {
            text.push_str(&format!(",{:.10e},{:.10e}", row.mean[j], row.std[j]));
        }
        text.push('\n');
    }
    let mut f = std::fs::File::create(path).stage(Stage::Output)?;
    f.write_all(text.as_bytes()).stage(Stage::Output)
}
