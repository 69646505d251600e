//! Self-contained SVG plots of a results directory.
//!
//! Output depends only on the files read, so identical results give
//! byte-identical plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{HarnessError, Result};
use crate::experiment::{read_rows, write_text, ResultRow};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

#[derive(Deserialize)]
struct StepLine {
    record: String,
    #[serde(default)]
    t: usize,
    #[serde(default)]
    l_fix: Vec<f64>,
}

/// L_fix values of one run, in timestep order, concatenated.
fn read_trace(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let mut steps = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: StepLine = serde_json::from_str(line)?;
        if rec.record == "step" {
            steps.push((rec.t, rec.l_fix));
        }
    }
    steps.sort_by_key(|(t, _)| *t);
    Ok(steps.into_iter().flat_map(|(_, l)| l).collect())
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        let span = (self.x_max - self.x_min).max(f64::MIN_POSITIVE);
        LEFT + (v - self.x_min) / span * (WIDTH - LEFT - RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        let span = (self.y_max - self.y_min).max(f64::MIN_POSITIVE);
        HEIGHT - BOTTOM - (v - self.y_min) / span * (HEIGHT - TOP - BOTTOM)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn open_svg(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (TOP + HEIGHT - BOTTOM) / 2.0,
        (TOP + HEIGHT - BOTTOM) / 2.0,
        escape(y_label)
    );
    let _ = writeln!(
        out,
        r#"<rect x="{LEFT}" y="{TOP}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
        WIDTH - LEFT - RIGHT,
        HEIGHT - TOP - BOTTOM
    );
}

fn y_ticks(out: &mut String, frame: &Frame, log: bool) {
    let (lo, hi) = (frame.y_min, frame.y_max);
    let ticks: Vec<f64> = if log {
        (lo.floor() as i64..=hi.ceil() as i64)
            .map(|e| e as f64)
            .filter(|e| *e >= lo && *e <= hi)
            .collect()
    } else {
        (0..=4).map(|i| lo + (hi - lo) * i as f64 / 4.0).collect()
    };
    for v in ticks {
        let y = frame.y(v);
        let label = if log {
            format!("1e{}", v as i64)
        } else {
            format!("{v:.3}")
        };
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{y:.1}" x2="{LEFT}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{label}</text>"#,
            LEFT - 4.0,
            LEFT - 6.0,
            y + 4.0
        );
    }
}

fn trace_svg(method: &str, hash: &str, traces: &[(usize, Vec<f64>)]) -> String {
    let floor = 1e-16;
    let logs: Vec<Vec<f64>> = traces
        .iter()
        .map(|(_, tr)| tr.iter().map(|v| v.max(floor).log10()).collect())
        .collect();
    let all = logs.iter().flatten().copied();
    let (mut y_min, mut y_max) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if !y_min.is_finite() {
        (y_min, y_max) = (-1.0, 0.0);
    }
    if y_max - y_min < 1.0 {
        y_min = (y_min - 0.5).floor();
        y_max = (y_max + 0.5).ceil();
    }
    let x_max = logs.iter().map(Vec::len).max().unwrap_or(1).max(2) as f64 - 1.0;
    let frame = Frame {
        x_min: 0.0,
        x_max,
        y_min,
        y_max,
    };
    let mut out = String::new();
    open_svg(
        &mut out,
        &format!("L_fix traces, {method} (config {hash})"),
        "refinement round (timesteps in order)",
        "L_fix (log10)",
    );
    y_ticks(&mut out, &frame, true);
    for (i, ((id, _), ys)) in traces.iter().zip(&logs).enumerate() {
        if ys.is_empty() {
            continue;
        }
        let points: Vec<String> = ys
            .iter()
            .enumerate()
            .map(|(k, &v)| format!("{:.2},{:.2}", frame.x(k as f64), frame.y(v)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline data-instance="{id}" fill="none" stroke="{}" stroke-opacity="0.6" stroke-width="1" points="{}"/>"#,
            PALETTE[i % PALETTE.len()],
            points.join(" ")
        );
    }
    out.push_str("</svg>\n");
    out
}

fn strip_svg(hash: &str, groups: &[(String, Vec<f64>)]) -> String {
    let values = groups.iter().flat_map(|(_, v)| v.iter().copied());
    let (mut y_min, mut y_max) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    if y_max - y_min < 1e-12 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let frame = Frame {
        x_min: -0.5,
        x_max: groups.len() as f64 - 0.5,
        y_min,
        y_max,
    };
    let mut out = String::new();
    open_svg(
        &mut out,
        &format!("d_noi by method (config {hash})"),
        "method",
        "d_noi",
    );
    y_ticks(&mut out, &frame, false);
    for (g, (method, vals)) in groups.iter().enumerate() {
        let cx = frame.x(g as f64);
        let _ = writeln!(
            out,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            HEIGHT - BOTTOM + 16.0,
            escape(method)
        );
        let n = vals.len().max(1) as f64;
        for (k, v) in vals.iter().enumerate() {
            // Deterministic horizontal jitter spread over the slot.
            let jitter = ((k as f64 + 0.5) / n - 0.5) * 0.5;
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" fill-opacity="0.6"/>"#,
                frame.x(g as f64 + jitter),
                frame.y(*v),
                PALETTE[g % PALETTE.len()]
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Reads `results.csv` and the per-run reports under `dir` and writes
/// `plots/lfix_<method>.svg` for each method plus `plots/d_noi_strip.svg`.
/// Writes nothing when there are no result rows. Returns the files written.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_rows(&dir.join("results.csv"))?;
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let mut by_method: BTreeMap<&str, Vec<&ResultRow>> = BTreeMap::new();
    for row in &rows {
        by_method.entry(&row.method).or_default().push(row);
    }
    let hash = &rows[0].config_hash;
    let plots = dir.join("plots");
    fs::create_dir_all(&plots).map_err(|e| HarnessError::io(&plots, e))?;
    let mut written = Vec::new();

    for (method, rows) in &by_method {
        let mut traces = Vec::with_capacity(rows.len());
        for row in rows {
            let path = dir
                .join("reports")
                .join(method)
                .join(format!("{:04}.jsonl", row.instance_id));
            let trace = if path.exists() {
                read_trace(&path)?
            } else {
                Vec::new()
            };
            traces.push((row.instance_id, trace));
        }
        let path = plots.join(format!("lfix_{method}.svg"));
        write_text(&path, &trace_svg(method, hash, &traces))?;
        written.push(path);
    }

    let groups: Vec<(String, Vec<f64>)> = by_method
        .iter()
        .map(|(m, rows)| (m.to_string(), rows.iter().map(|r| r.d_noi).collect()))
        .collect();
    let path = plots.join("d_noi_strip.svg");
    write_text(&path, &strip_svg(hash, &groups))?;
    written.push(path);
    Ok(written)
}
