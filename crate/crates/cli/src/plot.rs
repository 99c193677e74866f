//! Line charts of per-round metrics as standalone SVG.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use thiserror::Error;

use crate::output::{write_atomic, Summary, SUMMARY_JSON};

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("no input CSV files")]
    NoInputs,
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: row {row}: cannot parse `{value}` in column `{column}`")]
    BadValue {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
#[value(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Accuracy,
    MeanEpsilon,
}

impl Metric {
    pub fn column(self) -> &'static str {
        match self {
            Metric::Accuracy => "global_accuracy",
            Metric::MeanEpsilon => "mean_epsilon",
        }
    }

    fn axis_label(self) -> &'static str {
        match self {
            Metric::Accuracy => "global accuracy",
            Metric::MeanEpsilon => "mean epsilon",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Legend label: the run's summary label when a `summary.json` sits next to
/// the CSV, otherwise the parent directory name.
fn series_label(path: &Path) -> String {
    let dir = path.parent().unwrap_or(Path::new("."));
    if let Ok(text) = fs::read_to_string(dir.join(SUMMARY_JSON)) {
        if let Ok(s) = serde_json::from_str::<Summary>(&text) {
            return s.label;
        }
    }
    dir.file_name()
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn read_series(path: &Path, metric: Metric) -> Result<Series, PlotError> {
    let csv_err = |source| PlotError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| PlotError::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
        })
    };
    let round_col = find("round")?;
    let value_col = find(metric.column())?;
    let mut points = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let parse = |col: usize, name: &str| -> Result<Option<f64>, PlotError> {
            let raw = rec.get(col).unwrap_or("");
            if raw.is_empty() {
                return Ok(None);
            }
            raw.parse::<f64>().map(Some).map_err(|_| PlotError::BadValue {
                path: path.to_path_buf(),
                row: row + 1,
                column: name.to_string(),
                value: raw.to_string(),
            })
        };
        if let (Some(x), Some(y)) = (parse(round_col, "round")?, parse(value_col, metric.column())?) {
            points.push((x, y));
        }
    }
    Ok(Series {
        label: series_label(path),
        points,
    })
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 0.0 { lo.abs() * 0.05 } else { 0.5 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

pub fn render_svg(series: &[Series], metric: Metric) -> String {
    let (w, h) = (800.0, 480.0);
    let (left, right, top, bottom) = (70.0, 200.0, 30.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            top + ph + 18.0,
            fmt_tick(xv)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            sy(yv) + 4.0,
            fmt_tick(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">round</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        metric.axis_label()
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 10.0 + 18.0 * i as f64;
        let lx = w - right + 15.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

pub fn emit_plot(csvs: &[PathBuf], output: &Path, metric: Metric) -> Result<(), PlotError> {
    if csvs.is_empty() {
        return Err(PlotError::NoInputs);
    }
    let series = csvs
        .iter()
        .map(|p| read_series(p, metric))
        .collect::<Result<Vec<_>, _>>()?;
    write_atomic(output, render_svg(&series, metric).as_bytes()).map_err(|source| PlotError::Write {
        path: output.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_csv(dir: &Path, name: &str, header: &str, rows: usize) -> PathBuf {
        let sub = dir.join(name);
        fs::create_dir_all(&sub).unwrap();
        let mut text = format!("{header}\n");
        for r in 1..=rows {
            let cols = header.split(',').count();
            let mut vals = vec![r.to_string()];
            vals.extend((1..cols).map(|c| format!("0.{c}{r}")));
            text.push_str(&vals.join(","));
            text.push('\n');
        }
        let p = sub.join("rounds.csv");
        fs::write(&p, text).unwrap();
        p
    }

    const WITH_EPS: &str =
        "round,global_accuracy,global_loss,mean_val_accuracy,mean_epsilon,threshold,ema_sensitivity,participating_clients";
    const NO_EPS: &str = "round,global_accuracy,global_loss,mean_val_accuracy,threshold,ema_sensitivity,participating_clients";

    #[test]
    fn one_series_ten_points() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_csv(dir.path(), "a", WITH_EPS, 10);
        let out = dir.path().join("plot.svg");
        emit_plot(&[p], &out, Metric::Accuracy).unwrap();
        let svg = fs::read_to_string(&out).unwrap();
        assert!(svg.starts_with("<svg xmlns"));
        assert_eq!(svg.matches("<polyline").count(), 1);
        let points = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(points.split(' ').count(), 10);
    }

    #[test]
    fn two_series_two_legend_entries() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_csv(dir.path(), "run_a", WITH_EPS, 5);
        let b = write_csv(dir.path(), "run_b", WITH_EPS, 5);
        let out = dir.path().join("plot.svg");
        emit_plot(&[a, b], &out, Metric::MeanEpsilon).unwrap();
        let svg = fs::read_to_string(&out).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">run_a</text>") && svg.contains(">run_b</text>"));
    }

    #[test]
    fn missing_epsilon_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_csv(dir.path(), "base", NO_EPS, 3);
        let err = emit_plot(&[p], &dir.path().join("x.svg"), Metric::MeanEpsilon).unwrap_err();
        assert!(err.to_string().contains("mean_epsilon"), "{err}");
    }
}
