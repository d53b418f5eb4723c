//! Static SVG plots: learning curves, NMI curves, and 2D traces colored by
//! inferred cluster. Hand-rolled SVG keeps the artifact self-contained.

use std::fmt::Write as _;
use std::path::Path;

use crate::eval::EvalReport;
use crate::metrics::read_metrics;

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 30.0;
const MARGIN_T: f64 = 48.0;
const MARGIN_B: f64 = 56.0;

pub const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

fn finite_bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

/// Multi-series line chart with axes, ticks, and a legend. The config
/// fingerprint is embedded as an SVG comment.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    fingerprint: &str,
) -> String {
    let (x_lo, x_hi) =
        finite_bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y_lo, y_hi) =
        finite_bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let px = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(svg, "<!-- config fingerprint: {fingerprint} -->");
    let _ = writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>",
        WIDTH / 2.0,
        title
    );

    // axes
    let _ = writeln!(
        svg,
        "<line x1=\"{MARGIN_L}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>",
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\"/>",
        HEIGHT - MARGIN_B
    );
    for i in 0..=5 {
        let fx = x_lo + (x_hi - x_lo) * i as f64 / 5.0;
        let fy = y_lo + (y_hi - y_lo) * i as f64 / 5.0;
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{:.3}</text>",
            px(fx),
            HEIGHT - MARGIN_B + 18.0,
            fx
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{:.3}</text>",
            MARGIN_L - 6.0,
            py(fy) + 4.0,
            fy
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{MARGIN_L}\" y1=\"{0:.1}\" x2=\"{1}\" y2=\"{0:.1}\" stroke=\"#dddddd\"/>",
            py(fy),
            WIDTH - MARGIN_R
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{}</text>",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 14.0,
        x_label
    );
    let _ = writeln!(
        svg,
        "<text x=\"18\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>",
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        y_label
    );

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>",
            color,
            pts.join(" ")
        );
        let ly = MARGIN_T + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            "<line x1=\"{0}\" y1=\"{ly}\" x2=\"{1}\" y2=\"{ly}\" stroke=\"{2}\" stroke-width=\"3\"/>",
            WIDTH - MARGIN_R - 130.0,
            WIDTH - MARGIN_R - 104.0,
            color
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
            WIDTH - MARGIN_R - 98.0,
            ly + 4.0,
            s.label
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// 2D exploration traces colored by inferred cluster; goals drawn as
/// crosses in the same color.
pub fn trace_chart(title: &str, report: &EvalReport) -> String {
    let all_points = report
        .traces
        .iter()
        .flat_map(|t| t.points.iter().map(|p| p[0]))
        .chain(report.traces.iter().filter_map(|t| t.goal.map(|g| g[0])));
    let (x_lo, x_hi) = finite_bounds(all_points);
    let all_points_y = report
        .traces
        .iter()
        .flat_map(|t| t.points.iter().map(|p| p[1]))
        .chain(report.traces.iter().filter_map(|t| t.goal.map(|g| g[1])));
    let (y_lo, y_hi) = finite_bounds(all_points_y);
    let side = (WIDTH - MARGIN_L - MARGIN_R).min(HEIGHT - MARGIN_T - MARGIN_B);
    let span = (x_hi - x_lo).max(y_hi - y_lo);
    let px = |x: f64| MARGIN_L + (x - x_lo) / span * side;
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y_lo) / span * side;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(svg, "<!-- config fingerprint: {} -->", report.fingerprint);
    let _ = writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>",
        WIDTH / 2.0,
        title
    );
    for trace in &report.traces {
        let color = PALETTE[trace.inferred_cluster % PALETTE.len()];
        let pts: Vec<String> =
            trace.points.iter().map(|p| format!("{:.2},{:.2}", px(p[0]), py(p[1]))).collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.2\" opacity=\"0.8\" points=\"{}\"/>",
            color,
            pts.join(" ")
        );
        if let Some(goal) = trace.goal {
            let (gx, gy) = (px(goal[0]), py(goal[1]));
            let _ = writeln!(
                svg,
                "<path d=\"M {0:.1} {1:.1} L {2:.1} {3:.1} M {0:.1} {3:.1} L {2:.1} {1:.1}\" stroke=\"{4}\" stroke-width=\"2\"/>",
                gx - 5.0,
                gy - 5.0,
                gx + 5.0,
                gy + 5.0,
                color
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Renders the standard plot set for a finished run directory:
/// `learning-curve.svg`, `nmi-curve.svg`, and `traces.svg`.
pub fn write_run_plots(run_dir: &Path) -> Result<Vec<std::path::PathBuf>, std::io::Error> {
    let metrics = read_metrics(&run_dir.join("metrics.jsonl")).map_err(std::io::Error::other)?;
    let fingerprint =
        metrics.header.as_ref().map(|h| h.fingerprint.clone()).unwrap_or_else(|| "unknown".into());
    let mut written = Vec::new();

    let ep1: Vec<(f64, f64)> =
        metrics.records.iter().map(|r| (r.iteration as f64, r.test_return_ep1)).collect();
    let ep2: Vec<(f64, f64)> =
        metrics.records.iter().map(|r| (r.iteration as f64, r.test_return_ep2)).collect();
    let chart = line_chart(
        "Held-out test return",
        "iteration",
        "mean episode return",
        &[
            Series { label: "episode 1 (explore)", points: ep1 },
            Series { label: "episode 2 (exploit)", points: ep2 },
        ],
        &fingerprint,
    );
    let path = run_dir.join("learning-curve.svg");
    std::fs::write(&path, chart)?;
    written.push(path);

    let nmi_by_iter: Vec<(f64, f64)> =
        metrics.records.iter().map(|r| (r.iteration as f64, r.nmi)).collect();
    let eval_path = run_dir.join("eval.json");
    let mut nmi_series = vec![Series { label: "end-of-exploration NMI", points: nmi_by_iter }];
    let report = if eval_path.exists() { Some(EvalReport::load(&eval_path)?) } else { None };
    if let Some(report) = &report {
        let curve: Vec<(f64, f64)> =
            report.nmi_curve.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)).collect();
        nmi_series.push(Series { label: "per-step NMI (final eval)", points: curve });
    }
    let chart = line_chart(
        "Cluster inference quality",
        "iteration / exploration step",
        "NMI",
        &nmi_series,
        &fingerprint,
    );
    let path = run_dir.join("nmi-curve.svg");
    std::fs::write(&path, chart)?;
    written.push(path);

    if let Some(report) = &report {
        let chart = trace_chart("Exploration traces by inferred cluster", report);
        let path = run_dir.join("traces.svg");
        std::fs::write(&path, chart)?;
        written.push(path);
    }
    Ok(written)
}
