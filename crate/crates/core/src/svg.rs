//! Minimal SVG output: line plots and heat maps.

use std::fmt::Write as _;

use crate::align::AlignmentMatrix;

const W: f64 = 560.0;
const H: f64 = 360.0;
const PAD: f64 = 56.0;
const COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// One named series of `(x, y)` points.
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Line plot with one marker per point. Each series gets its own y scale
/// so that quantities with different units can share the plot; the left
/// axis labels belong to the first series.
pub fn line_plot(title: &str, x_label: &str, series: &[Series]) -> String {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let (left, right, top, bottom) = (PAD, W - PAD, PAD, H - PAD);
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" stroke="black" fill="none"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (left + right) / 2.0,
        H - 16.0,
        escape(x_label)
    );
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * (right - left);
    for (k, se) in series.iter().enumerate() {
        let (y0, y1) = bounds(se.points.iter().map(|p| p.1));
        let sy = |y: f64| bottom - (y - y0) / (y1 - y0) * (bottom - top);
        let color = COLORS[k % COLORS.len()];
        let mut d = String::new();
        for (i, &(x, y)) in se.points.iter().filter(|p| p.1.is_finite()).enumerate() {
            let _ = write!(
                d,
                "{}{:.2} {:.2} ",
                if i == 0 { "M" } else { "L" },
                sx(x),
                sy(y)
            );
        }
        let _ = writeln!(
            s,
            r#"<path class="series" d="{}" stroke="{color}" fill="none" stroke-width="2"/>"#,
            d.trim_end()
        );
        for &(x, y) in se.points.iter().filter(|p| p.1.is_finite()) {
            let _ = writeln!(
                s,
                r#"<circle class="point" data-series="{}" cx="{:.2}" cy="{:.2}" r="4" fill="{color}"><title>{} = {y:.4} at {x}</title></circle>"#,
                escape(&se.name),
                sx(x),
                sy(y),
                escape(&se.name)
            );
        }
        if k == 0 {
            for (v, y) in [(y0, bottom), (y1, top)] {
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#,
                    left - 6.0,
                    y + 4.0
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            right - 120.0,
            top + 16.0 * k as f64,
            escape(&se.name)
        );
    }
    for (v, x) in [(x0, left), (x1, right)] {
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="middle">{v}</text>"#,
            bottom + 16.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Heat map of an alignment: tokens on the vertical axis, frames on the
/// horizontal axis, darker cells for larger weights.
pub fn alignment_heat_map(
    title: &str,
    alignment: &AlignmentMatrix,
    token_labels: &[String],
) -> String {
    let (t, k) = (alignment.tokens(), alignment.frames());
    let cell = 10.0;
    let (left, top) = (48.0, 28.0);
    let width = left + cell * k as f64 + 8.0;
    let height = top + cell * t as f64 + 8.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="9" data-tokens="{t}" data-frames="{k}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{width}" height="{height}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="14" font-size="12">{}</text>"#,
        escape(title)
    );
    for i in 0..t {
        if let Some(label) = token_labels.get(i) {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                left - 4.0,
                top + cell * i as f64 + 8.0,
                escape(label)
            );
        }
        for j in 0..k {
            let w = alignment.get(i, j).clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - w)).round() as u8;
            let _ = writeln!(
                s,
                r#"<rect class="cell" x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)"/>"#,
                left + cell * j as f64,
                top + cell * i as f64
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
