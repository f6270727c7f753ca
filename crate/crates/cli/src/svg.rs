//! Self-contained SVG line plots.

use std::fmt::Write;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const TICKS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Style {
    Trajectory,
    Mean,
    Bound,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    xs: Vec<f64>,
    ys: Vec<f64>,
    style: Style,
    label: Option<String>,
}

impl Series {
    /// Thin gray line without a legend entry.
    pub fn trajectory(xs: &[f64], ys: Vec<f64>) -> Self {
        Self {
            xs: xs.to_vec(),
            ys,
            style: Style::Trajectory,
            label: None,
        }
    }

    /// Solid blue line.
    pub fn mean(xs: &[f64], ys: Vec<f64>, label: &str) -> Self {
        Self {
            xs: xs.to_vec(),
            ys,
            style: Style::Mean,
            label: Some(label.into()),
        }
    }

    /// Dashed green line.
    pub fn bound(xs: &[f64], ys: Vec<f64>, label: &str) -> Self {
        Self {
            xs: xs.to_vec(),
            ys,
            style: Style::Bound,
            label: Some(label.into()),
        }
    }
}

fn stroke(style: Style) -> &'static str {
    match style {
        Style::Trajectory => r##"stroke="#b4b4b4" stroke-width="0.6""##,
        Style::Mean => r##"stroke="#1f4fbf" stroke-width="2""##,
        Style::Bound => r##"stroke="#1a9641" stroke-width="2" stroke-dasharray="6 4""##,
    }
}

/// Renders all series on shared linear axes. Non-finite points are skipped.
pub fn render(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let finite = |v: &&f64| v.is_finite();
    let x_max = series
        .iter()
        .flat_map(|s| s.xs.iter().filter(finite))
        .fold(0.0f64, |a, &b| a.max(b));
    let y_max = series
        .iter()
        .flat_map(|s| s.ys.iter().filter(finite))
        .fold(0.0f64, |a, &b| a.max(b));
    let x_max = if x_max > 0.0 { x_max } else { 1.0 };
    let y_max = if y_max > 0.0 { 1.05 * y_max } else { 1.0 };
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + plot_w * x / x_max;
    let py = |y: f64| TOP + plot_h * (1.0 - y / y_max);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for k in 0..=TICKS {
        let fx = x_max * k as f64 / TICKS as f64;
        let fy = y_max * k as f64 / TICKS as f64;
        let (x, y) = (px(fx), py(fy));
        let _ = writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{b:.2}" x2="{x:.2}" y2="{b2:.2}" stroke="black"/><text x="{x:.2}" y="{t:.2}" text-anchor="middle">{}</text>"#,
            tick_label(fx),
            b = TOP + plot_h,
            b2 = TOP + plot_h + 5.0,
            t = TOP + plot_h + 20.0
        );
        let _ = writeln!(
            out,
            r#"<line x1="{l:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/><text x="{t:.2}" y="{yt:.2}" text-anchor="end">{}</text>"#,
            tick_label(fy),
            l = LEFT - 5.0,
            t = LEFT - 8.0,
            yt = y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
        escape(y_label),
        y = TOP + plot_h / 2.0
    );

    // Trajectories first so the mean and bound stay on top.
    let mut ordered: Vec<&Series> = series.iter().collect();
    ordered.sort_by_key(|s| s.style != Style::Trajectory);
    for s in ordered {
        let mut points = String::new();
        for (&x, &y) in s.xs.iter().zip(&s.ys) {
            if x.is_finite() && y.is_finite() {
                let _ = write!(points, "{:.2},{:.2} ", px(x), py(y));
            }
        }
        let _ = writeln!(
            out,
            r#"<polyline fill="none" {} points="{}"/>"#,
            stroke(s.style),
            points.trim_end()
        );
    }

    let mut legend_y = TOP + 18.0;
    for s in series.iter().filter(|s| s.label.is_some()) {
        let x = WIDTH - RIGHT - 170.0;
        let _ = writeln!(
            out,
            r#"<line x1="{x}" y1="{legend_y}" x2="{}" y2="{legend_y}" {}/><text x="{}" y="{}">{}</text>"#,
            x + 30.0,
            stroke(s.style),
            x + 38.0,
            legend_y + 4.0,
            escape(s.label.as_deref().unwrap_or_default())
        );
        legend_y += 18.0;
    }
    out.push_str("</svg>\n");
    out
}

fn tick_label(v: f64) -> String {
    if v == 0.0 || (1e-2..1e4).contains(&v.abs()) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.1e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
