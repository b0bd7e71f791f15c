//! Bare-bones SVG charts for quick looks at the figure data. The CSV files
//! are the reference output; these drawings carry no extra numbers.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;

#[derive(Clone, Copy, Debug)]
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
    log_x: bool,
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone, log_x: bool) -> Frame {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            it.filter(|v| v.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
        };
        let mut x = span(&mut xs.clone().map(|v| if log_x { v.max(1e-12).log10() } else { v }));
        let mut y = span(&mut ys.clone());
        for r in [&mut x, &mut y] {
            if !r.0.is_finite() {
                *r = (0.0, 1.0);
            }
            if r.1 - r.0 < 1e-12 {
                *r = (r.0 - 0.5, r.1 + 0.5);
            }
        }
        y.0 = y.0.min(0.0);
        Frame { x, y, log_x }
    }

    fn px(&self, x: f64) -> f64 {
        let x = if self.log_x { x.max(1e-12).log10() } else { x };
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * MARGIN)
    }
}

fn header(out: &mut String, title: &str, xlabel: &str, ylabel: &str, f: &Frame) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, W / 2.0, title);
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN, MARGIN);
    let _ = writeln!(out, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 20.0, xlabel);
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        ylabel
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let yv = f.y.0 + t * (f.y.1 - f.y.0);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#,
            MARGIN - 6.0,
            f.py(yv) + 4.0,
            yv
        );
        let xv = f.x.0 + t * (f.x.1 - f.x.0);
        let label = if f.log_x { 10f64.powf(xv) } else { xv };
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{:.0}</text>"#,
            MARGIN + t * (W - 2.0 * MARGIN),
            H - MARGIN + 16.0,
            label
        );
    }
}

fn polyline(out: &mut String, f: &Frame, pts: &[(f64, f64)], style: &str) {
    if pts.is_empty() {
        return;
    }
    let mut d = String::new();
    for (i, (x, y)) in pts.iter().enumerate() {
        let _ = write!(d, "{}{:.2} {:.2} ", if i == 0 { "M" } else { "L" }, f.px(*x), f.py(*y));
    }
    let _ = writeln!(out, r#"<path d="{}" fill="none" {}/>"#, d.trim_end(), style);
}

/// Points with vertical error bars over a dashed model curve; log x axis.
pub fn scatter_with_curve(
    title: &str,
    xlabel: &str,
    ylabel: &str,
    points: &[(f64, f64, f64, f64)],
    curve: &[(f64, f64)],
) -> String {
    let xs = points.iter().map(|p| p.0).chain(curve.iter().map(|c| c.0));
    let ys = points.iter().flat_map(|p| [p.2, p.3]).chain(curve.iter().map(|c| c.1));
    let f = Frame::fit(xs.collect::<Vec<_>>().into_iter(), ys.collect::<Vec<_>>().into_iter(), true);
    let mut out = String::new();
    header(&mut out, title, xlabel, ylabel, &f);
    polyline(&mut out, &f, curve, r#"stroke="gray" stroke-dasharray="6 4""#);
    for &(x, y, lo, hi) in points {
        let _ = writeln!(
            out,
            r#"<path d="M{:.2} {:.2} L{:.2} {:.2}" stroke="black"/>"#,
            f.px(x),
            f.py(lo),
            f.px(x),
            f.py(hi)
        );
        let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3"/>"#, f.px(x), f.py(y));
    }
    out.push_str("</svg>\n");
    out
}

/// Histogram bars with two overlay curves (solid and dashed).
pub fn bars_with_overlays(
    title: &str,
    xlabel: &str,
    bars: &[(f64, f64, f64)],
    solid: &[(f64, f64)],
    dashed: &[(f64, f64)],
) -> String {
    let xs = bars.iter().flat_map(|b| [b.0, b.1]);
    let ys = bars.iter().map(|b| b.2).chain(solid.iter().map(|c| c.1)).chain(dashed.iter().map(|c| c.1));
    let f = Frame::fit(xs.collect::<Vec<_>>().into_iter(), ys.collect::<Vec<_>>().into_iter(), false);
    let mut out = String::new();
    header(&mut out, title, xlabel, "count", &f);
    for &(lo, hi, c) in bars {
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="lightsteelblue" stroke="steelblue"/>"#,
            f.px(lo),
            f.py(c),
            f.px(hi) - f.px(lo),
            f.py(0.0) - f.py(c)
        );
    }
    polyline(&mut out, &f, solid, r#"stroke="black""#);
    polyline(&mut out, &f, dashed, r#"stroke="gray" stroke-dasharray="6 4""#);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_closed_documents() {
        let s = scatter_with_curve("t", "N", "y", &[(60.0, 0.5, 0.4, 0.6)], &[(10.0, 0.3), (100.0, 0.6)]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        let b = bars_with_overlays("t", "N", &[(59.5, 60.5, 100.0)], &[], &[]);
        assert!(b.contains("<rect x="));
    }
}
