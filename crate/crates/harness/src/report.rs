//! Metric tables, prediction grids and standalone SVG figures built from
//! completed run records.

use crate::pipeline::{read_grid, InStage, RunRecord, Stage, StageError, StageResult};
use pimlosc::grid::GridSolution;
use pimlosc::metrics::MetricSet;
use pimlosc::pde::{make_benchmark, Benchmark, BenchmarkOverrides};
use pimlosc::Array;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Profile times drawn as line plots for each benchmark.
pub fn snapshot_times(benchmark: Benchmark) -> &'static [f64] {
    match benchmark {
        Benchmark::AllenCahn => &[0.81, 0.99],
        Benchmark::Schrodinger => &[1.28, 1.5],
        _ => &[0.83, 0.98],
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportFiles {
    pub metrics_csv: PathBuf,
    pub predictions: Vec<PathBuf>,
    pub heatmaps: Vec<PathBuf>,
    pub snapshots: Vec<PathBuf>,
}

fn missing(record: &RunRecord, what: &str, path: &Path, e: impl std::fmt::Display) -> StageError {
    StageError {
        stage: Stage::Report,
        message: format!("record {}: cannot read {what} {}: {e}", record.run_id, path.display()),
    }
}

/// Stacks two grids with the same xs and channels along time.
pub fn concat_levels(a: &GridSolution, b: &GridSolution) -> pimlosc::Result<GridSolution> {
    if a.xs != b.xs || a.n_channels != b.n_channels {
        return Err(pimlosc::Error::Dimension("grids to stack must share xs and channels".into()));
    }
    let mut times = a.times.clone();
    times.extend_from_slice(&b.times);
    let mut data = a.values.data().to_vec();
    data.extend_from_slice(b.values.data());
    let values = Array::from_vec(vec![times.len(), a.width()], data)?;
    GridSolution::new(times, a.xs.clone(), a.n_channels, values)
}

fn display_grid(g: &GridSolution) -> pimlosc::Result<GridSolution> {
    if g.n_channels == 2 {
        g.magnitude()
    } else {
        Ok(g.clone())
    }
}

pub fn write_metrics_csv(path: &Path, records: &[RunRecord]) -> StageResult<()> {
    let mut text = String::from("run_id,benchmark,cell,seed,test_nu");
    for n in MetricSet::NAMES {
        text.push(',');
        text.push_str(n);
    }
    for n in MetricSet::NAMES {
        text.push_str(",magnitude_");
        text.push_str(n);
    }
    text.push('\n');
    for r in records {
        let nu = r.test_nu.map(|v| v.to_string()).unwrap_or_default();
        let _ = write!(
            text,
            "{},{},{},{},{}",
            r.run_id,
            r.config.benchmark.name(),
            r.config.oscillator.cell.name(),
            r.config.seed,
            nu
        );
        for v in r.metrics.primary.values() {
            let _ = write!(text, ",{v:.10e}");
        }
        for j in 0..4 {
            match r.metrics.magnitude {
                Some(m) => {
                    let _ = write!(text, ",{:.10e}", m.values()[j]);
                }
                None => text.push(','),
            }
        }
        text.push('\n');
    }
    fs::write(path, text).stage(Stage::Output)
}

/// Writes `metrics.csv` plus, per record, the stitched prediction grid, a
/// space-time heatmap and snapshot profiles.
pub fn generate_report(records: &[RunRecord], out: &Path) -> StageResult<ReportFiles> {
    if records.is_empty() {
        return Err(StageError {
            stage: Stage::Report,
            message: "no run records to report".into(),
        });
    }
    fs::create_dir_all(out).stage(Stage::Output)?;
    let mut files = ReportFiles {
        metrics_csv: out.join("metrics.csv"),
        ..Default::default()
    };
    write_metrics_csv(&files.metrics_csv, records)?;
    for r in records {
        let a = &r.artifacts;
        let training = read_grid(&a.training_grid).map_err(|e| missing(r, "training grid", &a.training_grid, e))?;
        let rolled = read_grid(&a.rollout_grid).map_err(|e| missing(r, "rollout grid", &a.rollout_grid, e))?;
        let reference = read_grid(&a.reference_grid).map_err(|e| missing(r, "reference grid", &a.reference_grid, e))?;
        let prediction = concat_levels(&training, &rolled).stage(Stage::Report)?;
        let pred_path = out.join(format!("{}_prediction.csv", r.run_id));
        crate::pipeline::write_grid(&pred_path, &prediction)?;
        files.predictions.push(pred_path);

        let (_, domain) = make_benchmark(r.config.benchmark, &BenchmarkOverrides { nu: r.test_nu.or(r.config.nu), t_test_end: None })
            .stage(Stage::Report)?;
        let shown_pred = display_grid(&prediction).stage(Stage::Report)?;
        let shown_ref = display_grid(&reference).stage(Stage::Report)?;
        let title = format!("{} {} seed {}", r.config.benchmark.name(), r.config.oscillator.cell.name(), r.config.seed);

        let heat = out.join(format!("{}_heatmap.svg", r.run_id));
        fs::write(&heat, heatmap_svg(&title, &[("prediction", &shown_pred), ("reference", &shown_ref)], domain.t_train_end))
            .stage(Stage::Output)?;
        files.heatmaps.push(heat);

        let snap = out.join(format!("{}_snapshots.svg", r.run_id));
        let svg = snapshots_svg(&title, &shown_pred, &shown_ref, snapshot_times(r.config.benchmark)).stage(Stage::Report)?;
        fs::write(&snap, svg).stage(Stage::Output)?;
        files.snapshots.push(snap);
    }
    Ok(files)
}

const STOPS: [(f64, [f64; 3]); 5] = [
    (0.0, [68.0, 1.0, 84.0]),
    (0.25, [59.0, 82.0, 139.0]),
    (0.5, [33.0, 145.0, 140.0]),
    (0.75, [94.0, 201.0, 98.0]),
    (1.0, [253.0, 231.0, 37.0]),
];

fn colour(s: f64) -> String {
    let s = if s.is_finite() { s.clamp(0.0, 1.0) } else { 0.0 };
    let k = STOPS.iter().position(|(p, _)| *p >= s).unwrap_or(4).max(1);
    let (p0, c0) = STOPS[k - 1];
    let (p1, c1) = STOPS[k];
    let w = (s - p0) / (p1 - p0);
    let c: Vec<u8> = (0..3).map(|i| (c0[i] + w * (c1[i] - c0[i])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// At most `max` indices spread evenly over `0..n`.
fn sample_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|i| i * (n - 1) / (max - 1)).collect()
}

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 48.0;

/// Time on the horizontal axis, space vertically; the first channel only.
pub fn heatmap_svg(title: &str, panels: &[(&str, &GridSolution)], t_train_end: f64) -> String {
    let (lo, hi) = panels
        .iter()
        .flat_map(|(_, g)| g.values.data().iter().copied())
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let width = MARGIN + panels.len() as f64 * (PANEL_W + MARGIN);
    let height = PANEL_H + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="20">{title} (range {lo:.3e} to {hi:.3e})</text>"#);
    for (p, (label, g)) in panels.iter().enumerate() {
        let x0 = MARGIN + p as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN;
        let ts = sample_indices(g.k_t(), 120);
        let xs = sample_indices(g.k_x(), 100);
        let (t_min, t_max) = (g.times[0], *g.times.last().unwrap());
        let t_span = if t_max > t_min { t_max - t_min } else { 1.0 };
        let cw = PANEL_W / ts.len() as f64;
        let ch = PANEL_H / xs.len() as f64;
        let _ = writeln!(s, r#"<text x="{x0}" y="{}">{label}</text>"#, y0 - 6.0);
        for (a, &n) in ts.iter().enumerate() {
            for (b, &i) in xs.iter().enumerate() {
                let v = g.value(n, 0, i);
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                    x0 + a as f64 * cw,
                    y0 + PANEL_H - (b + 1) as f64 * ch,
                    cw + 0.05,
                    ch + 0.05,
                    colour((v - lo) / span)
                );
            }
        }
        let mx = x0 + (t_train_end - t_min) / t_span * PANEL_W;
        let _ = writeln!(
            s,
            r#"<line x1="{mx:.2}" y1="{y0}" x2="{mx:.2}" y2="{}" stroke="white" stroke-dasharray="4 3" stroke-width="1.5"/>"#,
            y0 + PANEL_H
        );
        let _ = writeln!(s, r#"<text x="{x0}" y="{}">t={t_min:.3}</text>"#, y0 + PANEL_H + 16.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">t={t_max:.3}</text>"#,
            x0 + PANEL_W,
            y0 + PANEL_H + 16.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn nearest_level(g: &GridSolution, t: f64) -> usize {
    (0..g.k_t())
        .min_by(|&a, &b| (g.times[a] - t).abs().total_cmp(&(g.times[b] - t).abs()))
        .unwrap_or(0)
}

fn polyline(xs: &[f64], ys: &[f64], to_px: impl Fn(f64, f64) -> (f64, f64)) -> String {
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let (px, py) = to_px(x, y);
            format!("{px:.2},{py:.2}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Reference (solid) and prediction (dashed) profiles at the levels nearest
/// each requested time.
pub fn snapshots_svg(title: &str, pred: &GridSolution, reference: &GridSolution, times: &[f64]) -> pimlosc::Result<String> {
    if pred.xs != reference.xs {
        return Err(pimlosc::Error::Dimension("snapshot grids must share xs".into()));
    }
    let width = MARGIN + times.len() as f64 * (PANEL_W + MARGIN);
    let height = PANEL_H + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="20">{title}</text>"#);
    let (x_min, x_max) = (pred.xs[0], *pred.xs.last().unwrap());
    for (p, &t) in times.iter().enumerate() {
        let np = nearest_level(pred, t);
        let nr = nearest_level(reference, t);
        let yp: Vec<f64> = (0..pred.k_x()).map(|i| pred.value(np, 0, i)).collect();
        let yr: Vec<f64> = (0..reference.k_x()).map(|i| reference.value(nr, 0, i)).collect();
        let finite = yp.iter().chain(&yr).copied().filter(|v| v.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
        let x0 = MARGIN + p as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN;
        let to_px = |x: f64, y: f64| {
            let y = if y.is_finite() { y.clamp(lo, hi) } else { lo };
            (
                x0 + (x - x_min) / (x_max - x_min) * PANEL_W,
                y0 + PANEL_H - (y - lo) / (hi - lo) * PANEL_H,
            )
        };
        let _ = writeln!(
            s,
            r#"<rect x="{x0}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(s, r#"<text x="{x0}" y="{}">t={:.4}</text>"#, y0 - 6.0, pred.times[np]);
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="black" stroke-width="1.5"/>"#,
            polyline(&reference.xs, &yr, to_px)
        );
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="crimson" stroke-dasharray="5 3" stroke-width="1.5"/>"#,
            polyline(&pred.xs, &yp, to_px)
        );
        let _ = writeln!(s, r#"<text x="{x0}" y="{}">[{lo:.3}, {hi:.3}]</text>"#, y0 + PANEL_H + 16.0);
    }
    s.push_str("</svg>\n");
    Ok(s)
}
