//! Minimal SVG line charts of history CSVs.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

pub const METRICS: [&str; 3] = ["loss", "det_acc", "angle_mae_deg"];

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    /// `(epoch, value)`, finite values only.
    pub points: Vec<(f64, f64)>,
}

/// Validation-split series of `metric` from a history CSV. Files without a
/// `split` column contribute every row.
pub fn read_series(path: &Path, metric: &str) -> Result<Series> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = r.headers()?.clone();
    let col = |n: &str| headers.iter().position(|h| h == n);
    let epoch = col("epoch").ok_or_else(|| anyhow!("{}: no epoch column", path.display()))?;
    let split = col("split");
    let value = col(metric);
    let mut points = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        if split.is_some_and(|s| rec.get(s) != Some("val")) {
            continue;
        }
        let x: f64 = rec
            .get(epoch)
            .unwrap_or("")
            .parse()
            .with_context(|| format!("{}: row {}: bad epoch", path.display(), i + 1))?;
        let Some(v) = value else { continue };
        let cell = rec.get(v).unwrap_or("");
        if cell.is_empty() {
            continue;
        }
        let y: f64 = cell
            .parse()
            .with_context(|| format!("{}: row {}: bad {metric}", path.display(), i + 1))?;
        if y.is_finite() {
            points.push((x, y));
        }
    }
    let name = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| format!("{}/", n.to_string_lossy()))
        .unwrap_or_default()
        + &path
            .file_stem()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
    Ok(Series { name, points })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// One polyline per series; `None` when no series has a point.
pub fn chart(metric: &str, series: &[Series]) -> Option<String> {
    let all: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .collect();
    if all.is_empty() {
        return None;
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#,
        W / 2.0,
        H - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(metric)
    );
    for (v, x, y, anchor) in [
        (x0, l, b + 16.0, "middle"),
        (x1, r, b + 16.0, "middle"),
        (y0, l - 6.0, b + 4.0, "end"),
        (y1, l - 6.0, t + 4.0, "end"),
    ] {
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}">{}</text>"#,
            fmt_tick(v)
        );
    }
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        if !ser.points.is_empty() {
            let pts: Vec<String> = ser
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                pts.join(" ")
            );
        }
        let ly = t + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{color}" text-anchor="end">{}</text>"#,
            r,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    Some(s)
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Writes `<metric>.svg` for each metric with data; returns the metrics that
/// were skipped for lack of data.
pub fn plot_files(inputs: &[&Path], out: &Path) -> Result<Vec<&'static str>> {
    if inputs.is_empty() {
        bail!("plot needs at least one CSV");
    }
    let mut skipped = Vec::new();
    for metric in METRICS {
        let series = inputs
            .iter()
            .map(|p| read_series(p, metric))
            .collect::<Result<Vec<_>>>()?;
        match chart(metric, &series) {
            Some(svg) => {
                let path = out.join(format!("{metric}.svg"));
                std::fs::write(&path, svg)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            None => skipped.push(metric),
        }
    }
    Ok(skipped)
}
