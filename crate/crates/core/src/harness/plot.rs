//! Plain-text SVG line charts.

use std::fmt::Write as _;

use super::report::{AggregateReport, Axis, Series};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

pub struct Line<'a> {
    pub label: &'a str,
    pub x: &'a [f64],
    pub mean: &'a [f64],
    pub min: &'a [f64],
    pub max: &'a [f64],
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders mean lines with min/max bands. Points that are non-finite, or
/// nonpositive on a log axis, are skipped. Returns `None` if nothing is drawable.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, log_y: bool, lines: &[Line]) -> Option<String> {
    let usable = |v: f64| v.is_finite() && (!log_y || v > 0.0);
    let ty = |v: f64| if log_y { v.log10() } else { v };
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for l in lines {
        for i in 0..l.x.len() {
            if !l.x[i].is_finite() {
                continue;
            }
            for v in [l.mean[i], l.min[i], l.max[i]] {
                if usable(v) {
                    x0 = x0.min(l.x[i]);
                    x1 = x1.max(l.x[i]);
                    y0 = y0.min(ty(v));
                    y1 = y1.max(ty(v));
                }
            }
        }
    }
    if !(x0.is_finite() && y0.is_finite()) {
        return None;
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        let pad = if y0 == 0.0 { 1.0 } else { y0.abs() * 0.1 };
        y0 -= pad;
        y1 += pad;
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + (1.0 - (ty(y) - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">
<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for t in 0..=4 {
        let f = t as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let xp = LEFT + f * pw;
        let yp = TOP + (1.0 - f) * ph;
        let ytxt = if log_y { format!("1e{yv:.1}") } else { format!("{yv:.3e}") };
        let _ = writeln!(
            s,
            r##"<line x1="{xp:.1}" y1="{:.1}" x2="{xp:.1}" y2="{:.1}" stroke="black"/><text x="{xp:.1}" y="{:.1}" text-anchor="middle">{}</text>
<line x1="{:.1}" y1="{yp:.1}" x2="{LEFT}" y2="{yp:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 18.0,
            format_tick(xv),
            LEFT - 5.0,
            LEFT - 8.0,
            yp + 4.0,
            ytxt
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 15.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );

    for (n, l) in lines.iter().enumerate() {
        let color = PALETTE[n % PALETTE.len()];
        let idx: Vec<usize> = (0..l.x.len())
            .filter(|&i| l.x[i].is_finite() && usable(l.min[i]) && usable(l.max[i]))
            .collect();
        if idx.len() > 1 {
            let mut band = String::new();
            for &i in &idx {
                let _ = write!(band, "{:.2},{:.2} ", px(l.x[i]), py(l.max[i]));
            }
            for &i in idx.iter().rev() {
                let _ = write!(band, "{:.2},{:.2} ", px(l.x[i]), py(l.min[i]));
            }
            let _ = writeln!(
                s,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
                band.trim_end()
            );
        }
        let mut path = String::new();
        for i in (0..l.x.len()).filter(|&i| l.x[i].is_finite() && usable(l.mean[i])) {
            let _ = write!(path, "{:.2},{:.2} ", px(l.x[i]), py(l.mean[i]));
        }
        if !path.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                path.trim_end()
            );
        }
        let ly = TOP + 15.0 + 18.0 * n as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 20.0,
            lx + 25.0,
            ly + 4.0,
            escape(l.label)
        );
    }
    s.push_str("</svg>\n");
    Some(s)
}

fn format_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{:.2}", v)
    }
}

/// One chart per `(series, axis)` pair over all reports. Returns
/// `(file stem, svg)` pairs; empty charts are skipped with a warning.
pub fn emit_plots(reports: &[AggregateReport], axes: &[Axis]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for series in Series::ALL {
        for &axis in axes {
            let xs: Vec<Vec<f64>> = reports.iter().map(|r| r.axis(axis)).collect();
            let lines: Vec<Line> = reports
                .iter()
                .zip(&xs)
                .filter(|(r, _)| !r.is_empty())
                .map(|(r, x)| {
                    let env = r.series(series);
                    Line {
                        label: &r.label,
                        x,
                        mean: &env.mean,
                        min: &env.min,
                        max: &env.max,
                    }
                })
                .collect();
            let log_y = series == Series::Stationarity;
            let stem = format!("{}_vs_{}", series.name(), axis.name());
            match line_chart(&stem, axis.name(), series.name(), log_y, &lines) {
                Some(svg) => out.push((stem, svg)),
                None => log::warn!("skipping empty chart {stem}"),
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_series_is_horizontal() {
        let x = [1.0, 2.0, 3.0];
        let y = [2.0, 2.0, 2.0];
        let svg = line_chart(
            "c",
            "k",
            "v",
            false,
            &[Line {
                label: "a<b",
                x: &x,
                mean: &y,
                min: &y,
                max: &y,
            }],
        )
        .unwrap();
        let poly = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        let pts: Vec<&str> = poly.split('"').nth(1).unwrap().split(' ').collect();
        let ys: Vec<&str> = pts.iter().map(|p| p.split(',').nth(1).unwrap()).collect();
        assert!(ys.windows(2).all(|w| w[0] == w[1]));
        assert!(svg.contains("a&lt;b"));
    }

    #[test]
    fn empty_chart_skipped() {
        let x = [1.0];
        let y = [f64::NAN];
        assert!(line_chart(
            "e",
            "k",
            "v",
            true,
            &[Line {
                label: "a",
                x: &x,
                mean: &y,
                min: &y,
                max: &y
            }]
        )
        .is_none());
    }
}
