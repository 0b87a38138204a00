//! Self-contained SVG charts of layer scores and the strength sweep.

use std::fmt::Write;

use log::warn;

use super::report::Report;
use crate::intervention::{GridPoint, LayerScore};

pub const PLOT_LAYER_RATIO_FILE: &str = "plot_layer_ratio.svg";
pub const PLOT_SWEEP_FILE: &str = "plot_lambda_sweep.svg";

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PlotFile {
    pub name: String,
    pub svg: String,
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<title>{}</title>"#, escape(title));
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Linear map from `[lo, hi]` onto `[a, b]`; a degenerate domain maps to the midpoint.
fn scale(v: f64, lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    if hi > lo {
        a + (v - lo) / (hi - lo) * (b - a)
    } else {
        (a + b) / 2.0
    }
}

fn y_axis(out: &mut String, lo: f64, hi: f64, top: f64, bottom: f64, label: &str) {
    let _ = writeln!(
        out,
        r#"<g class="y-axis" data-min="{lo}" data-max="{hi}"><line x1="{LEFT}" y1="{top:.2}" x2="{LEFT}" y2="{bottom:.2}" stroke="black"/>"#
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * f64::from(i) / 4.0;
        let y = scale(v, lo, hi, bottom, top);
        let _ = writeln!(
            out,
            r#"<text class="y-tick" x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.2}" transform="rotate(-90 14 {:.2})" text-anchor="middle">{}</text></g>"#,
        (top + bottom) / 2.0,
        (top + bottom) / 2.0,
        escape(label)
    );
}

/// Bar chart of the fairness-efficiency ratio per MoE layer; selected layers are filled darker.
pub fn layer_ratio_svg(scores: &[LayerScore], selected: &[usize], threshold: Option<f64>) -> String {
    let mut out = String::new();
    header(&mut out, "Layer sensitivity R(l)");
    let (bottom, top) = (HEIGHT - BOTTOM, TOP);
    let lo = scores.iter().map(|s| s.ratio).fold(0.0, f64::min);
    let mut hi = scores.iter().map(|s| s.ratio).fold(0.0, f64::max);
    if let Some(t) = threshold.filter(|t| t.is_finite()) {
        hi = hi.max(t);
    }
    if hi <= lo {
        hi = lo + 1.0;
    }
    y_axis(&mut out, lo, hi, top, bottom, "R(l)");
    let zero = scale(0.0, lo, hi, bottom, top);
    let _ = writeln!(
        out,
        r#"<g class="x-axis"><line x1="{LEFT}" y1="{zero:.2}" x2="{:.2}" y2="{zero:.2}" stroke="black"/>"#,
        WIDTH - RIGHT
    );
    let slot = (WIDTH - LEFT - RIGHT) / scores.len().max(1) as f64;
    for (i, s) in scores.iter().enumerate() {
        let x = LEFT + slot * (i as f64 + 0.5);
        let _ = writeln!(
            out,
            r#"<text class="x-tick" data-value="{}" x="{x:.2}" y="{:.2}" text-anchor="middle">L{}</text>"#,
            s.layer,
            bottom + 16.0,
            s.layer
        );
    }
    out.push_str("</g>\n");
    for (i, s) in scores.iter().enumerate() {
        let x = LEFT + slot * (i as f64 + 0.2);
        let y = scale(s.ratio, lo, hi, bottom, top);
        let fill = if selected.contains(&s.layer) { "#1f4e79" } else { "#9dc3e6" };
        let _ = writeln!(
            out,
            r#"<rect class="bar" data-layer="{}" data-ratio="{}" x="{x:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{fill}"/>"#,
            s.layer,
            s.ratio,
            y.min(zero),
            slot * 0.6,
            (y - zero).abs()
        );
    }
    if let Some(t) = threshold.filter(|t| t.is_finite()) {
        let y = scale(t, lo, hi, bottom, top);
        let _ = writeln!(
            out,
            r##"<line class="threshold" data-value="{t}" x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#c00000" stroke-dasharray="4 3"/>"##,
            WIDTH - RIGHT
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">MoE layer</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        HEIGHT - 8.0
    );
    out.push_str("</svg>\n");
    out
}

fn polyline(out: &mut String, class: &str, pts: &[(f64, f64)], color: &str) {
    let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let _ = writeln!(
        out,
        r#"<polyline class="{class}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
        coords.join(" ")
    );
    for (x, y) in pts {
        let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
    }
}

/// Preference (upper panel) and perplexity ratio (lower panel) against the
/// strength grid. The x axis spans exactly the grid, one tick per value.
pub fn lambda_sweep_svg(grid: &[GridPoint], lambda_star: f64, beta: f64) -> String {
    let mut out = String::new();
    header(&mut out, "Preference and perplexity vs strength");
    let x_lo = grid.first().map_or(0.0, |p| p.lambda);
    let x_hi = grid.last().map_or(0.0, |p| p.lambda);
    let x_of = |l: f64| scale(l, x_lo, x_hi, LEFT, WIDTH - RIGHT);
    let mid = TOP + (HEIGHT - TOP - BOTTOM) / 2.0;
    let (p_top, p_bottom) = (TOP, mid - 12.0);
    let (r_top, r_bottom) = (mid + 12.0, HEIGHT - BOTTOM);

    y_axis(&mut out, 0.0, 1.0, p_top, p_bottom, "preference");
    let parity = scale(0.5, 0.0, 1.0, p_bottom, p_top);
    let _ = writeln!(
        out,
        r##"<line class="parity" x1="{LEFT}" y1="{parity:.2}" x2="{:.2}" y2="{parity:.2}" stroke="#888" stroke-dasharray="4 3"/>"##,
        WIDTH - RIGHT
    );
    let pref: Vec<(f64, f64)> = grid
        .iter()
        .map(|p| (x_of(p.lambda), scale(p.preference, 0.0, 1.0, p_bottom, p_top)))
        .collect();
    polyline(&mut out, "preference", &pref, "#1f4e79");

    let budget = 1.0 + beta;
    let r_lo = grid.iter().map(|p| p.ppl_ratio).fold(1.0, f64::min).min(1.0);
    let r_hi = grid.iter().map(|p| p.ppl_ratio).fold(budget, f64::max);
    y_axis(&mut out, r_lo, r_hi, r_top, r_bottom, "PPL ratio");
    let by = scale(budget, r_lo, r_hi, r_bottom, r_top);
    let _ = writeln!(
        out,
        r##"<line class="budget" data-value="{budget}" x1="{LEFT}" y1="{by:.2}" x2="{:.2}" y2="{by:.2}" stroke="#c00000" stroke-dasharray="4 3"/>"##,
        WIDTH - RIGHT
    );
    let ratio: Vec<(f64, f64)> = grid
        .iter()
        .map(|p| (x_of(p.lambda), scale(p.ppl_ratio, r_lo, r_hi, r_bottom, r_top)))
        .collect();
    polyline(&mut out, "ppl-ratio", &ratio, "#c55a11");

    let sx = x_of(lambda_star);
    let _ = writeln!(
        out,
        r##"<line class="lambda-star" data-value="{lambda_star}" x1="{sx:.2}" y1="{TOP}" x2="{sx:.2}" y2="{r_bottom:.2}" stroke="#2e7d32" stroke-dasharray="2 2"/>"##
    );
    let _ = writeln!(
        out,
        r#"<g class="x-axis" data-min="{x_lo}" data-max="{x_hi}"><line x1="{LEFT}" y1="{r_bottom:.2}" x2="{:.2}" y2="{r_bottom:.2}" stroke="black"/>"#,
        WIDTH - RIGHT
    );
    for p in grid {
        let _ = writeln!(
            out,
            r#"<text class="x-tick" data-value="{}" x="{:.2}" y="{:.2}" text-anchor="middle" font-size="9">{}</text>"#,
            p.lambda,
            x_of(p.lambda),
            r_bottom + 14.0,
            p.lambda
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">lambda</text></g>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        HEIGHT - 8.0
    );
    out.push_str("</svg>\n");
    out
}

/// Charts the report has data for. Missing inputs skip their chart with a warning.
pub fn render_plots(report: &Report) -> Vec<PlotFile> {
    let mut out = Vec::new();
    match &report.aals {
        Some(a) if !a.scores.is_empty() => out.push(PlotFile {
            name: PLOT_LAYER_RATIO_FILE.into(),
            svg: layer_ratio_svg(&a.scores, &a.selection.layers, Some(a.selection.threshold)),
        }),
        _ => warn!("report has no layer scores; skipping the R(l) plot"),
    }
    match &report.sweep {
        Some(s) if !s.grid.is_empty() => out.push(PlotFile {
            name: PLOT_SWEEP_FILE.into(),
            svg: lambda_sweep_svg(&s.grid, s.lambda_star, s.beta),
        }),
        _ => warn!("report has no strength grid; skipping the sweep plot"),
    }
    out
}
