//! SVG learning curves and sensitivity plots.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{read_metrics, series, MetricsRecord};
use super::run::{read_json, SensitivityReport, METRICS_FILE, SENSITIVITY_FILE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    Losses,
    Threshold,
    Accuracy,
    Sensitivity,
}

impl PlotKind {
    pub const ALL: [PlotKind; 4] = [PlotKind::Losses, PlotKind::Threshold, PlotKind::Accuracy, PlotKind::Sensitivity];

    pub fn name(self) -> &'static str {
        match self {
            PlotKind::Losses => "losses",
            PlotKind::Threshold => "threshold",
            PlotKind::Accuracy => "accuracy",
            PlotKind::Sensitivity => "sensitivity",
        }
    }
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown plot `{s}`")))
    }
}

type Series = (String, Vec<(f64, f64)>);

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|(_, s)| s.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let pad = |a: f64, b: f64| {
        let d = if b > a { 0.05 * (b - a) } else { 0.5 };
        (a - d, b + d)
    };
    (pad(x0, x1), pad(y0, y1))
}

fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let ((x0, x1), (y0, y1)) = bounds(series);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Metrics files under `dir`: its own, or one per `seed-*` subdirectory.
fn metrics_runs(dir: &Path) -> Result<Vec<(String, Vec<MetricsRecord>)>> {
    let own = dir.join(METRICS_FILE);
    if own.exists() {
        return Ok(vec![(String::new(), read_metrics(&own)?)]);
    }
    let mut runs = Vec::new();
    if dir.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(METRICS_FILE).exists())
            .collect();
        entries.sort();
        for p in entries {
            let label = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            runs.push((label, read_metrics(&p.join(METRICS_FILE))?));
        }
    }
    if runs.is_empty() {
        return Err(Error::MissingMetric(format!("no {METRICS_FILE} under {}", dir.display())));
    }
    Ok(runs)
}

fn collect(runs: &[(String, Vec<MetricsRecord>)], names: &[&str]) -> Result<Vec<Series>> {
    let mut out = Vec::new();
    for (label, recs) in runs {
        for name in names {
            let s = series(recs, name);
            if !s.is_empty() {
                let full = if label.is_empty() { name.to_string() } else { format!("{label} {name}") };
                out.push((full, s));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::MissingMetric(names.join(", ")));
    }
    Ok(out)
}

/// Writes `<which>.svg` (or one file per swept parameter for sensitivity)
/// into `dir` and returns the paths.
pub fn plot_curves(dir: &Path, which: PlotKind) -> Result<Vec<PathBuf>> {
    if which == PlotKind::Sensitivity {
        return plot_sensitivity(dir);
    }
    let runs = metrics_runs(dir)?;
    let (names, y_label): (&[&str], &str) = match which {
        PlotKind::Losses => (&["loss", "l_trn", "l_ce", "l_ment", "l_val"], "loss"),
        PlotKind::Threshold => (&["tau"], "τ"),
        PlotKind::Accuracy => (&["target_acc"], "target accuracy"),
        PlotKind::Sensitivity => unreachable!(),
    };
    let s = collect(&runs, names)?;
    let path = dir.join(format!("{}.svg", which.name()));
    line_chart(&path, which.name(), "step", y_label, &s)?;
    Ok(vec![path])
}

fn plot_sensitivity(dir: &Path) -> Result<Vec<PathBuf>> {
    let file = dir.join(SENSITIVITY_FILE);
    if !file.exists() {
        return Err(Error::MissingMetric(format!("{} (run a sensitivity sweep first)", file.display())));
    }
    let report: SensitivityReport = read_json(&file)?;
    let mut paths = Vec::new();
    for (param, x_label) in [("lambda", "log10 λ"), ("margin", "log2 m")] {
        let pts: Vec<(f64, f64)> = report
            .points
            .iter()
            .filter(|p| p.param == param)
            .map(|p| {
                let x = if param == "lambda" { p.value.log10() } else { p.value.log2() };
                (x, p.target.mean)
            })
            .collect();
        if pts.is_empty() {
            continue;
        }
        let path = dir.join(format!("sensitivity_{param}.svg"));
        line_chart(&path, &format!("sensitivity to {param}"), x_label, "mean target accuracy", &[(param.to_string(), pts)])?;
        paths.push(path);
    }
    if paths.is_empty() {
        return Err(Error::MissingMetric("sensitivity points".into()));
    }
    Ok(paths)
}
