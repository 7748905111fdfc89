//! Training telemetry: per-step CSV records, curve summaries, and a simple
//! SVG line chart of reward trajectories.
//!
//! CSV columns are fixed: `step,mean_total_reward,mean_format_reward,
//! mean_accuracy_reward,mean_kl,clip_fraction,sft_loss`, with empty cells for
//! fields that do not apply to a step. Floats are written in Rust's shortest
//! round-trip notation, so identical runs produce identical bytes.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::train::{StepStats, TelemetrySink};

pub const CSV_HEADER: &str =
    "step,mean_total_reward,mean_format_reward,mean_accuracy_reward,mean_kl,clip_fraction,sft_loss";

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: line {line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("no telemetry rows found")]
    Empty,
}

/// Writes one CSV row per recorded step, flushing after each row so partial
/// runs remain inspectable.
pub struct CsvSink {
    writer: BufWriter<File>,
}

impl CsvSink {
    pub fn create(path: &Path) -> Result<Self, TelemetryError> {
        let mut writer = BufWriter::new(File::create(path)?);
        writeln!(writer, "{CSV_HEADER}")?;
        writer.flush()?;
        Ok(CsvSink { writer })
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn format_row(s: &StepStats) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        s.step,
        cell(s.mean_total_reward),
        cell(s.mean_format_reward),
        cell(s.mean_accuracy_reward),
        cell(s.mean_kl),
        cell(s.clip_fraction),
        cell(s.sft_loss),
    )
}

impl TelemetrySink for CsvSink {
    fn record(&mut self, stats: &StepStats) {
        // Telemetry failure should not abort training; surface it in the log.
        if writeln!(self.writer, "{}", format_row(stats))
            .and_then(|_| self.writer.flush())
            .is_err()
        {
            log::error!("failed to write telemetry row for step {}", stats.step);
        }
    }
}

fn parse_cell(
    s: &str,
    path: &Path,
    line: usize,
    col: &str,
) -> Result<Option<f64>, TelemetryError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|e| TelemetryError::Parse {
        path: path.to_path_buf(),
        line,
        reason: format!("column `{col}`: {e}"),
    })
}

pub fn read_telemetry(path: &Path) -> Result<Vec<StepStats>, TelemetryError> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != CSV_HEADER {
                return Err(TelemetryError::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    reason: format!("unexpected header {line:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 7 {
            return Err(TelemetryError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("expected 7 columns, got {}", cells.len()),
            });
        }
        let n = i + 1;
        rows.push(StepStats {
            step: cells[0].parse().map_err(|e| TelemetryError::Parse {
                path: path.to_path_buf(),
                line: n,
                reason: format!("column `step`: {e}"),
            })?,
            mean_total_reward: parse_cell(cells[1], path, n, "mean_total_reward")?,
            mean_format_reward: parse_cell(cells[2], path, n, "mean_format_reward")?,
            mean_accuracy_reward: parse_cell(cells[3], path, n, "mean_accuracy_reward")?,
            mean_kl: parse_cell(cells[4], path, n, "mean_kl")?,
            clip_fraction: parse_cell(cells[5], path, n, "clip_fraction")?,
            sft_loss: parse_cell(cells[6], path, n, "sft_loss")?,
        });
    }
    Ok(rows)
}

/// First/last window means of a reward curve, plus the clip-fraction
/// trajectory endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub steps: usize,
    pub window: usize,
    pub first_window_mean_reward: f64,
    pub last_window_mean_reward: f64,
    pub rising: bool,
    pub first_window_clip_fraction: f64,
    pub last_window_clip_fraction: f64,
}

fn window_mean(values: &[f64], window: usize, from_end: bool) -> f64 {
    let w = window.min(values.len()).max(1);
    let slice = if from_end { &values[values.len() - w..] } else { &values[..w] };
    slice.iter().sum::<f64>() / slice.len() as f64
}

/// Summarizes reward rows (rows without `mean_total_reward` are skipped).
/// Returns `None` when no reward rows exist.
pub fn summarize(rows: &[StepStats], window: usize) -> Option<CurveSummary> {
    let rewards: Vec<f64> = rows.iter().filter_map(|r| r.mean_total_reward).collect();
    if rewards.is_empty() {
        return None;
    }
    let clips: Vec<f64> = rows.iter().filter_map(|r| r.clip_fraction).collect();
    let first = window_mean(&rewards, window, false);
    let last = window_mean(&rewards, window, true);
    Some(CurveSummary {
        steps: rewards.len(),
        window,
        first_window_mean_reward: first,
        last_window_mean_reward: last,
        rising: last > first,
        first_window_clip_fraction: if clips.is_empty() {
            0.0
        } else {
            window_mean(&clips, window, false)
        },
        last_window_clip_fraction: if clips.is_empty() {
            0.0
        } else {
            window_mean(&clips, window, true)
        },
    })
}

const SVG_W: f64 = 800.0;
const SVG_H: f64 = 400.0;
const MARGIN: f64 = 45.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

struct Series<'a> {
    label: String,
    color: &'a str,
    dashed: bool,
    points: Vec<(f64, f64)>,
}

fn polyline(points: &[(f64, f64)], x_max: f64, y_min: f64, y_max: f64) -> String {
    let span_x = x_max.max(1.0);
    let span_y = (y_max - y_min).max(1e-9);
    let mut out = String::new();
    for (x, y) in points {
        let px = MARGIN + (x / span_x) * (SVG_W - 2.0 * MARGIN);
        let py = SVG_H - MARGIN - ((y - y_min) / span_y) * (SVG_H - 2.0 * MARGIN);
        let _ = write!(out, "{px:.2},{py:.2} ");
    }
    out.trim_end().to_string()
}

/// Renders total and format reward curves for each named telemetry file as
/// one SVG chart.
pub fn render_reward_svg(curves: &[(String, Vec<StepStats>)]) -> String {
    let mut series = Vec::new();
    for (i, (name, rows)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let total: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| r.mean_total_reward.map(|v| (r.step as f64, v)))
            .collect();
        let format: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| r.mean_format_reward.map(|v| (r.step as f64, v)))
            .collect();
        if !total.is_empty() {
            series.push(Series {
                label: format!("{name} total"),
                color,
                dashed: false,
                points: total,
            });
        }
        if !format.is_empty() {
            series.push(Series {
                label: format!("{name} format"),
                color,
                dashed: true,
                points: format,
            });
        }
    }
    let x_max = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold(1.0f64, f64::max);
    let y_min = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .fold(0.0f64, f64::min);
    let y_max = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .fold(1.0f64, f64::max);

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" \
         viewBox=\"0 0 {SVG_W} {SVG_H}\">\n\
         <rect width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>\n"
    );
    // Axes.
    let _ = write!(
        svg,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{mid}\" y=\"{xl}\" font-size=\"12\" text-anchor=\"middle\">step</text>\n\
         <text x=\"14\" y=\"{ymid}\" font-size=\"12\" text-anchor=\"middle\" \
         transform=\"rotate(-90 14 {ymid})\">reward</text>\n",
        m = MARGIN,
        b = SVG_H - MARGIN,
        r = SVG_W - MARGIN,
        t = MARGIN,
        mid = SVG_W / 2.0,
        xl = SVG_H - 10.0,
        ymid = SVG_H / 2.0,
    );
    let _ = write!(
        svg,
        "<text x=\"{m}\" y=\"{b}\" font-size=\"10\" text-anchor=\"end\">{ymin:.2}</text>\n\
         <text x=\"{m}\" y=\"{t}\" font-size=\"10\" text-anchor=\"end\">{ymax:.2}</text>\n",
        m = MARGIN - 4.0,
        b = SVG_H - MARGIN,
        t = MARGIN + 4.0,
        ymin = y_min,
        ymax = y_max,
    );
    for (i, s) in series.iter().enumerate() {
        let dash = if s.dashed { " stroke-dasharray=\"5,3\"" } else { "" };
        let _ = write!(
            svg,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"{} points=\"{}\"/>\n",
            s.color,
            dash,
            polyline(&s.points, x_max, y_min, y_max)
        );
        let ly = MARGIN + 14.0 * i as f64 + 4.0;
        let _ = write!(
            svg,
            "<line x1=\"{x0}\" y1=\"{ly}\" x2=\"{x1}\" y2=\"{ly}\" stroke=\"{c}\"{dash}/>\n\
             <text x=\"{tx}\" y=\"{ty}\" font-size=\"11\">{label}</text>\n",
            x0 = SVG_W - 190.0,
            x1 = SVG_W - 170.0,
            c = s.color,
            tx = SVG_W - 164.0,
            ty = ly + 4.0,
            label = s.label,
        );
    }
    svg.push_str("</svg>\n");
    svg
}
