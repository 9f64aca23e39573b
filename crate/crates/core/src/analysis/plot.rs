//! Minimal deterministic SVG line charts.

use std::fmt::Write as _;
use std::path::Path;

use super::report::{read_table, Table};
use super::AnalysisError;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Clone, Debug, PartialEq)]
pub struct PlotSpec {
    /// Column for the horizontal axis.
    pub x: String,
    pub columns: Vec<String>,
    /// Keep only rows where `(column, value)` matches.
    pub filter: Option<(String, String)>,
    pub title: String,
}

fn span(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        let pad = if lo == 0.0 { 1.0 } else { 0.5 * lo.abs() };
        (lo - pad, hi + pad)
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders `table` to SVG text: one polyline per column, linear axes,
/// min/max tick labels, a legend.
pub fn svg_from_table(table: &Table, spec: &PlotSpec) -> Result<String, AnalysisError> {
    let table = match &spec.filter {
        Some((c, v)) => table.filter(c, v)?,
        None => table.clone(),
    };
    let xs = table.column(&spec.x)?;
    let mut series = Vec::with_capacity(spec.columns.len());
    for c in &spec.columns {
        let ys = table.column(c)?;
        let pts: Vec<(f64, f64)> = xs
            .iter()
            .zip(&ys)
            .filter_map(|(x, y)| Some((x.as_ref()?.to_owned(), y.as_ref()?.to_owned())))
            .collect();
        series.push((c, pts));
    }
    let all = || series.iter().flat_map(|(_, p)| p.iter());
    if all().next().is_none() {
        return Err(AnalysisError::Empty);
    }
    let (x0, x1) = span(
        all().map(|p| p.0).fold(f64::INFINITY, f64::min),
        all().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
    );
    let (y0, y1) = span(
        all().map(|p| p.1).fold(f64::INFINITY, f64::min),
        all().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    );
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, esc(&spec.title));
    let _ = writeln!(
        s,
        r#"<path d="M{LEFT} {TOP} V{} H{}" fill="none" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw
    );
    for (v, anchor, x, y) in [
        (x0, "middle", LEFT, TOP + ph + 16.0),
        (x1, "middle", LEFT + pw, TOP + ph + 16.0),
        (y0, "end", LEFT - 6.0, TOP + ph + 4.0),
        (y1, "end", LEFT - 6.0, TOP + 4.0),
    ] {
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{v:.4}</text>"#);
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 12.0,
        esc(&spec.x)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">value</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render_line_plot(csv: &Path, spec: &PlotSpec, out: &Path) -> Result<(), AnalysisError> {
    let svg = svg_from_table(&read_table(csv)?, spec)?;
    std::fs::write(out, svg).map_err(|source| AnalysisError::Io {
        path: out.display().to_string(),
        source,
    })
}
