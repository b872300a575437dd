//! Minimal vector-graphics rendering for the contrast/noise trade-off
//! curves: axes, ticks, one polyline with markers per method, legend.
//!
//! Output is plain SVG text built deterministically, so replotting the
//! same table yields identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One named curve; points are (background noise, contrast recovery)
/// in sweep order.
#[derive(Debug, Clone)]
pub struct PlotSeries {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 56.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn px(v: f64) -> String {
    format!("{v:.2}")
}

/// Shortest label that still distinguishes neighbouring ticks.
fn tick_label(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 {
        0
    } else {
        (-step.log10().floor() as i32).clamp(0, 6) as usize
    };
    format!("{v:.decimals$}")
}

/// Evenly spaced ticks with a step of 1, 2, or 5 times a power of ten.
fn ticks(lo: f64, hi: f64) -> (Vec<f64>, f64) {
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 5.5)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * span {
        // Snap values that should be exact multiples.
        out.push((t / step).round() * step);
        t += step;
    }
    (out, step)
}

/// Render the curves to an SVG document.
pub fn render_curves_svg(series: &[PlotSeries], title: &str) -> Result<String> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Config("nothing to plot: no curve points".into()));
    }
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for s in series {
        for (x, y) in &s.points {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::Domain(format!(
                    "curve '{}' has a non-finite point ({x}, {y})",
                    s.name
                )));
            }
            xs.push(*x);
            ys.push(*y);
        }
    }
    let pad = |lo: f64, hi: f64| {
        let span = (hi - lo).max(1e-12);
        (lo - 0.05 * span, hi + 0.05 * span)
    };
    let (x_lo, x_hi) = pad(
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let (y_lo, y_hi) = pad(
        ys.iter().cloned().fold(f64::INFINITY, f64::min),
        ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = |y: f64| MARGIN_TOP + (y_hi - y) / (y_hi - y_lo) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(
        svg,
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>"
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>",
        px(WIDTH / 2.0),
        title
    );

    // Axes and ticks.
    let axis = |x1: f64, y1: f64, x2: f64, y2: f64| {
        format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
            px(x1),
            px(y1),
            px(x2),
            px(y2)
        )
    };
    let _ = writeln!(
        svg,
        "{}",
        axis(MARGIN_LEFT, MARGIN_TOP + plot_h, MARGIN_LEFT + plot_w, MARGIN_TOP + plot_h)
    );
    let _ = writeln!(svg, "{}", axis(MARGIN_LEFT, MARGIN_TOP, MARGIN_LEFT, MARGIN_TOP + plot_h));

    let (x_ticks, x_step) = ticks(x_lo, x_hi);
    for t in &x_ticks {
        let x = sx(*t);
        let y0 = MARGIN_TOP + plot_h;
        let _ = writeln!(svg, "{}", axis(x, y0, x, y0 + 5.0));
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            px(x),
            px(y0 + 18.0),
            tick_label(*t, x_step)
        );
    }
    let (y_ticks, y_step) = ticks(y_lo, y_hi);
    for t in &y_ticks {
        let y = sy(*t);
        let _ = writeln!(svg, "{}", axis(MARGIN_LEFT - 5.0, y, MARGIN_LEFT, y));
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>",
            px(MARGIN_LEFT - 8.0),
            px(y + 4.0),
            tick_label(*t, y_step)
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">background noise (STD)</text>",
        px(MARGIN_LEFT + plot_w / 2.0),
        px(HEIGHT - 14.0)
    );
    let _ = writeln!(
        svg,
        "<text x=\"18\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">contrast recovery (CR)</text>",
        px(MARGIN_TOP + plot_h / 2.0),
        px(MARGIN_TOP + plot_h / 2.0)
    );

    // Curves with markers.
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if s.points.len() > 1 {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|(x, y)| format!("{},{}", px(sx(*x)), px(sy(*y))))
                .collect();
            let _ = writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                pts.join(" ")
            );
        }
        for (x, y) in &s.points {
            let _ = writeln!(
                svg,
                "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{color}\"/>",
                px(sx(*x)),
                px(sy(*y))
            );
        }
    }

    // Legend in the lower-right corner of the plot area.
    let legend_x = MARGIN_LEFT + plot_w - 150.0;
    let mut legend_y = MARGIN_TOP + plot_h - 16.0 * series.len() as f64 - 8.0;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            px(legend_x),
            px(legend_y),
            px(legend_x + 22.0),
            px(legend_y)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
            px(legend_x + 28.0),
            px(legend_y + 4.0),
            s.name
        );
        legend_y += 16.0;
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Render and write the plot file.
pub fn write_curves_svg(path: &Path, series: &[PlotSeries], title: &str) -> Result<()> {
    let svg = render_curves_svg(series, title)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, svg)?;
    Ok(())
}
