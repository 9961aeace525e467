//! Minimal deterministic SVG line charts.
//!
//! Sweeps and epoch curves need a visual artifact next to their CSV output.
//! A full plotting crate would drag in font rasterization and non-deterministic
//! layout; these charts are simple enough (polylines, points, error bars, a
//! legend) that emitting the SVG by hand keeps the output byte-stable across
//! runs, which the reproducibility checks rely on.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, SwatError};

/// One plotted line: a label, its points, and optional symmetric error bars
/// (half-heights, one per point).
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub err: Option<Vec<f64>>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series { label: label.into(), points, err: None }
    }

    pub fn with_err(label: impl Into<String>, points: Vec<(f64, f64)>, err: Vec<f64>) -> Self {
        Series { label: label.into(), points, err: Some(err) }
    }
}

/// Chart titles and axis captions.
#[derive(Debug, Clone, Copy)]
pub struct PlotSpec<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 44.0;
const MARGIN_BOTTOM: f64 = 56.0;
const TICKS: usize = 5;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(ch),
        }
    }
    out
}

/// Format an axis tick so adjacent ticks of the given spacing stay distinct,
/// without trailing noise digits.
fn fmt_tick(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 || step == 0.0 {
        if v.fract().abs() < 1e-9 {
            0
        } else {
            2
        }
    } else {
        ((-step.log10()).ceil() as usize + 1).min(6)
    };
    format!("{:.*}", decimals, v)
}

/// Expand a degenerate or too-tight range so the mapping to pixels is well
/// defined and points do not sit on the frame.
fn padded_range(min: f64, max: f64) -> (f64, f64) {
    let (mut lo, mut hi) = (min, max);
    if !(hi - lo).is_finite() || hi - lo < 1e-12 {
        let pad = if lo.abs() > 1e-12 { lo.abs() * 0.05 } else { 1.0 };
        lo -= pad;
        hi += pad;
    } else {
        let pad = (hi - lo) * 0.05;
        lo -= pad;
        hi += pad;
    }
    (lo, hi)
}

fn validate(series: &[Series]) -> Result<()> {
    if series.is_empty() {
        return Err(SwatError::EmptyData { context: "plot: no series".into() });
    }
    for s in series {
        if s.points.is_empty() {
            return Err(SwatError::EmptyData {
                context: format!("plot: series '{}' has no points", s.label),
            });
        }
        for &(x, y) in &s.points {
            if !x.is_finite() || !y.is_finite() {
                return Err(SwatError::invalid(
                    "plot",
                    format!("series '{}' contains a non-finite point ({}, {})", s.label, x, y),
                ));
            }
        }
        if let Some(err) = &s.err {
            if err.len() != s.points.len() {
                return Err(SwatError::DimensionMismatch {
                    context: format!("plot: error bars for series '{}'", s.label),
                    expected: s.points.len(),
                    got: err.len(),
                });
            }
            if err.iter().any(|e| !e.is_finite() || *e < 0.0) {
                return Err(SwatError::invalid(
                    "plot",
                    format!("series '{}' has a negative or non-finite error bar", s.label),
                ));
            }
        }
    }
    Ok(())
}

/// Render a line chart as an SVG document string.
pub fn render_line_svg(spec: &PlotSpec<'_>, series: &[Series]) -> Result<String> {
    validate(series)?;

    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for s in series {
        for (i, &(x, y)) in s.points.iter().enumerate() {
            let e = s.err.as_ref().map_or(0.0, |v| v[i]);
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y - e);
            ymax = ymax.max(y + e);
        }
    }
    let (xmin, xmax) = padded_range(xmin, xmax);
    let (ymin, ymax) = padded_range(ymin, ymax);

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let px = |x: f64| MARGIN_LEFT + (x - xmin) / (xmax - xmin) * plot_w;
    let py = |y: f64| MARGIN_TOP + (1.0 - (y - ymin) / (ymax - ymin)) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" \
         viewBox=\"0 0 {} {}\" font-family=\"sans-serif\">",
        WIDTH, HEIGHT, WIDTH, HEIGHT
    );
    let _ = writeln!(svg, "<rect width=\"{}\" height=\"{}\" fill=\"white\"/>", WIDTH, HEIGHT);
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>",
        WIDTH / 2.0,
        xml_escape(spec.title)
    );

    // Frame.
    let _ = writeln!(
        svg,
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333\"/>",
        MARGIN_LEFT, MARGIN_TOP, plot_w, plot_h
    );

    // Ticks, gridlines, labels.
    let x_step = (xmax - xmin) / (TICKS - 1) as f64;
    let y_step = (ymax - ymin) / (TICKS - 1) as f64;
    for i in 0..TICKS {
        let xv = xmin + x_step * i as f64;
        let yv = ymin + y_step * i as f64;
        let xp = px(xv);
        let yp = py(yv);
        let _ = writeln!(
            svg,
            "<line x1=\"{:.2}\" y1=\"{}\" x2=\"{:.2}\" y2=\"{}\" stroke=\"#ddd\"/>",
            xp,
            MARGIN_TOP,
            xp,
            MARGIN_TOP + plot_h
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{:.2}\" x2=\"{}\" y2=\"{:.2}\" stroke=\"#ddd\"/>",
            MARGIN_LEFT,
            yp,
            MARGIN_LEFT + plot_w,
            yp
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">{}</text>",
            xp,
            MARGIN_TOP + plot_h + 16.0,
            fmt_tick(xv, x_step)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"11\">{}</text>",
            MARGIN_LEFT - 6.0,
            yp + 4.0,
            fmt_tick(yv, y_step)
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\">{}</text>",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 14.0,
        xml_escape(spec.x_label)
    );
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\" \
         transform=\"rotate(-90 16 {})\">{}</text>",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        xml_escape(spec.y_label)
    );

    // Series bodies.
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        if let Some(err) = &s.err {
            for (i, &(x, y)) in s.points.iter().enumerate() {
                if err[i] == 0.0 {
                    continue;
                }
                let _ = writeln!(
                    svg,
                    "<line class=\"errbar\" x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" \
                     stroke=\"{}\" stroke-width=\"1\"/>",
                    px(x),
                    py(y - err[i]),
                    px(x),
                    py(y + err[i]),
                    color
                );
            }
        }
        let pts: Vec<String> =
            s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>",
            color,
            pts.join(" ")
        );
        for &(x, y) in &s.points {
            let _ = writeln!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\"/>",
                px(x),
                py(y),
                color
            );
        }
    }

    // Legend, top-right inside the frame.
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let ly = MARGIN_TOP + 16.0 + si as f64 * 18.0;
        let lx = MARGIN_LEFT + plot_w - 150.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{}\" \
             stroke-width=\"2\"/>",
            lx,
            ly,
            lx + 22.0,
            ly,
            color
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\">{}</text>",
            lx + 28.0,
            ly + 4.0,
            xml_escape(&s.label)
        );
    }

    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Render and write a line chart to `path`.
pub fn write_line_svg(path: &Path, spec: &PlotSpec<'_>, series: &[Series]) -> Result<()> {
    let svg = render_line_svg(spec, series)?;
    std::fs::write(path, svg).map_err(|e| SwatError::io(path, e))
}
