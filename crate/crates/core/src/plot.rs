//! Minimal self-contained SVG line plots.

use std::fmt::Write as _;

use crate::trace::CsvRow;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LinePlot<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub log_y: bool,
    /// Drawn as a dashed horizontal rule.
    pub reference: Option<f64>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64, log_y: bool) -> String {
    if log_y {
        format!("1e{}", v.round() as i64)
    } else if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e4) {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

impl LinePlot<'_> {
    /// Renders `points`; non-finite values (and non-positive ones on a log
    /// axis) break the polyline instead of being drawn.
    pub fn render(&self, points: &[(f64, f64)]) -> String {
        let transform = |y: f64| -> Option<f64> {
            if !y.is_finite() {
                return None;
            }
            if self.log_y {
                (y > 0.0).then(|| y.log10())
            } else {
                Some(y)
            }
        };
        let pts: Vec<(f64, Option<f64>)> = points.iter().map(|&(x, y)| (x, transform(y))).collect();
        let reference = self.reference.and_then(transform);
        let ys = pts.iter().filter_map(|p| p.1).chain(reference);
        let (mut y_min, mut y_max) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
        if !y_min.is_finite() {
            (y_min, y_max) = (0.0, 1.0);
        }
        if y_max - y_min <= 1e-300 {
            let pad = if y_min == 0.0 { 1.0 } else { y_min.abs() * 0.05 };
            y_min -= pad;
            y_max += pad;
        }
        let x_min = pts.first().map_or(0.0, |p| p.0);
        let mut x_max = pts.last().map_or(1.0, |p| p.0);
        if x_max <= x_min {
            x_max = x_min + 1.0;
        }
        let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let sx = |x: f64| MARGIN_LEFT + (x - x_min) / (x_max - x_min) * plot_w;
        let sy = |y: f64| MARGIN_TOP + (y_max - y) / (y_max - y_min) * plot_h;

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
        );
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
            WIDTH / 2.0,
            escape(self.title)
        );
        let _ = writeln!(
            svg,
            r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
        );
        for (y, anchor_y) in [(y_max, MARGIN_TOP + 4.0), (y_min, MARGIN_TOP + plot_h)] {
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{anchor_y}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
                MARGIN_LEFT - 6.0,
                fmt_tick(y, self.log_y)
            );
        }
        for (x, anchor) in [(x_min, "start"), (x_max, "end")] {
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{}" font-family="sans-serif" font-size="11" text-anchor="{anchor}">{}</text>"#,
                sx(x),
                MARGIN_TOP + plot_h + 16.0,
                x
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
            MARGIN_LEFT + plot_w / 2.0,
            HEIGHT - 12.0,
            escape(self.x_label)
        );
        let _ = writeln!(
            svg,
            r#"<text x="16" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            MARGIN_TOP + plot_h / 2.0,
            MARGIN_TOP + plot_h / 2.0,
            escape(self.y_label)
        );
        if let Some(r) = reference {
            let _ = writeln!(
                svg,
                r#"<line x1="{MARGIN_LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="gray" stroke-dasharray="6,4"/>"#,
                MARGIN_LEFT + plot_w,
                y = sy(r)
            );
        }
        let mut segment: Vec<String> = Vec::new();
        let flush = |segment: &mut Vec<String>, svg: &mut String| {
            if !segment.is_empty() {
                let _ = writeln!(
                    svg,
                    r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#,
                    segment.join(" ")
                );
                segment.clear();
            }
        };
        for (x, y) in &pts {
            match y {
                Some(y) => segment.push(format!("{:.2},{:.2}", sx(*x), sy(*y))),
                None => flush(&mut segment, &mut svg),
            }
        }
        flush(&mut segment, &mut svg);
        svg.push_str("</svg>\n");
        svg
    }
}

/// The three standard plots of a trace: cost, gradient-mapping norm (log
/// scale) and `λ_min(Q̃_L)`, as `(suffix, svg)` pairs.
pub fn trace_plots(name: &str, rows: &[CsvRow], oracle_value: Option<f64>) -> Vec<(&'static str, String)> {
    let series = |f: fn(&CsvRow) -> f64| -> Vec<(f64, f64)> { rows.iter().map(|r| (r.t as f64, f(r))).collect() };
    let cost_title = format!("{name}: cost");
    let map_title = format!("{name}: gradient mapping norm");
    let lambda_title = format!("{name}: smallest eigenvalue of Q - L'RvL");
    vec![
        (
            "cost",
            LinePlot {
                title: &cost_title,
                x_label: "iteration",
                y_label: "C(K, L)",
                log_y: false,
                reference: oracle_value,
            }
            .render(&series(|r| r.cost)),
        ),
        (
            "mapping",
            LinePlot {
                title: &map_title,
                x_label: "iteration",
                y_label: "mapping norm (log10)",
                log_y: true,
                reference: None,
            }
            .render(&series(|r| r.grad_map_norm)),
        ),
        (
            "lambda",
            LinePlot {
                title: &lambda_title,
                x_label: "iteration",
                y_label: "lambda_min",
                log_y: false,
                reference: Some(0.0),
            }
            .render(&series(|r| r.lambda_min_qtilde)),
        ),
    ]
}
