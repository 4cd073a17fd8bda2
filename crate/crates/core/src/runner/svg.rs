//! Minimal SVG emission: scatter panels and line plots with axes.

use std::fmt::Write as _;

use crate::{Condition, Vec2};

/// Per-class colours; class `k` uses entry `k % 24`.
pub const PALETTE: [&str; 24] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#393b79", "#637939", "#8c6d31", "#843c39", "#7b4173", "#3182bd", "#e6550d", "#31a354", "#756bb1", "#636363",
    "#6baed6", "#fd8d3c", "#74c476", "#9e9ac8",
];

/// Colour of unconditional points.
pub const NULL_COLOR: &str = "#000000";

pub fn class_color(c: Condition) -> &'static str {
    c.map_or(NULL_COLOR, |k| PALETTE[k % PALETTE.len()])
}

/// Axis-aligned data bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Bounds {
    /// Bounds covering `pts` with a 5% margin; degenerate spans widen to 1.
    pub fn covering<'a>(pts: impl IntoIterator<Item = &'a Vec2>) -> Self {
        let (mut x, mut y) = ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY));
        for p in pts {
            if p[0].is_finite() && p[1].is_finite() {
                x = (x.0.min(p[0]), x.1.max(p[0]));
                y = (y.0.min(p[1]), y.1.max(p[1]));
            }
        }
        let pad = |(lo, hi): (f64, f64)| {
            if !lo.is_finite() {
                return (-1.0, 1.0);
            }
            let span = if hi > lo { hi - lo } else { 1.0 };
            (lo - 0.05 * span, hi + 0.05 * span)
        };
        Self { x: pad(x), y: pad(y) }
    }
}

/// Fixed-precision number formatting keeps the output byte-stable.
fn f(v: f64) -> String {
    format!("{v:.2}")
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

struct Frame {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
    b: Bounds,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.left + (x - self.b.x.0) / (self.b.x.1 - self.b.x.0) * self.width
    }

    fn py(&self, y: f64) -> f64 {
        self.top + self.height - (y - self.b.y.0) / (self.b.y.1 - self.b.y.0) * self.height
    }

    fn axes(&self, s: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        let (l, t, w, h) = (self.left, self.top, self.width, self.height);
        let _ = writeln!(
            s,
            r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#000" stroke-width="1"/>"##,
            f(l),
            f(t),
            f(w),
            f(h)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="14" text-anchor="middle">{}</text>"#,
            f(l + w / 2.0),
            f(t - 8.0),
            escape(title)
        );
        for k in 0..=4 {
            let fx = self.b.x.0 + (self.b.x.1 - self.b.x.0) * k as f64 / 4.0;
            let fy = self.b.y.0 + (self.b.y.1 - self.b.y.0) * k as f64 / 4.0;
            let (x, y) = (self.px(fx), self.py(fy));
            let _ = writeln!(
                s,
                r##"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="#000"/><text x="{0}" y="{3}" font-size="10" text-anchor="middle">{4}</text>"##,
                f(x),
                f(t + h),
                f(t + h + 4.0),
                f(t + h + 15.0),
                tick_label(fx)
            );
            let _ = writeln!(
                s,
                r##"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="#000"/><text x="{3}" y="{4}" font-size="10" text-anchor="end">{5}</text>"##,
                f(l - 4.0),
                f(y),
                f(l),
                f(l - 6.0),
                f(y + 3.0),
                tick_label(fy)
            );
        }
        if !xlabel.is_empty() {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
                f(l + w / 2.0),
                f(t + h + 32.0),
                escape(xlabel)
            );
        }
        if !ylabel.is_empty() {
            let _ = writeln!(
                s,
                r#"<text x="{0}" y="{1}" font-size="12" text-anchor="middle" transform="rotate(-90 {0} {1})">{2}</text>"#,
                f(l - 40.0),
                f(t + h / 2.0),
                escape(ylabel)
            );
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\">\n<rect width=\"100%\" height=\"100%\" fill=\"#fff\"/>\n",
        f(w),
        f(h)
    )
}

/// One scatter panel: points with their class colours.
pub struct Panel<'a> {
    pub title: String,
    pub points: &'a [Vec2],
    pub labels: &'a [Condition],
}

const PANEL: f64 = 320.0;
const MARGIN: f64 = 60.0;

/// Side-by-side scatter panels sharing `bounds`.
pub fn scatter_panels(panels: &[Panel], bounds: Bounds) -> String {
    let width = panels.len() as f64 * (PANEL + MARGIN) + MARGIN;
    let height = PANEL + 2.0 * MARGIN;
    let mut s = header(width, height);
    for (i, p) in panels.iter().enumerate() {
        let frame =
            Frame { left: MARGIN + i as f64 * (PANEL + MARGIN), top: MARGIN, width: PANEL, height: PANEL, b: bounds };
        frame.axes(&mut s, &p.title, "", "");
        let _ = writeln!(
            s,
            r#"<clipPath id="clip{i}"><rect x="{}" y="{}" width="{}" height="{}"/></clipPath><g clip-path="url(#clip{i})">"#,
            f(frame.left),
            f(frame.top),
            f(PANEL),
            f(PANEL)
        );
        for (x, c) in p.points.iter().zip(p.labels) {
            if x[0].is_finite() && x[1].is_finite() {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{}" cy="{}" r="1.2" fill="{}" fill-opacity="0.6"/>"#,
                    f(frame.px(x[0])),
                    f(frame.py(x[1])),
                    class_color(*c)
                );
            }
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

/// A named polyline for [`line_plot`].
pub struct Series {
    pub label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

/// Line plot of several series with a legend; series `k` uses palette entry `k`.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let pts: Vec<Vec2> = series.iter().flat_map(|s| s.xs.iter().zip(&s.ys).map(|(x, y)| Vec2::new(*x, *y))).collect();
    let mut b = Bounds::covering(&pts);
    if pts.iter().all(|p| p[0] >= 0.0 && p[0] <= 1.0) {
        b.x = (0.0, 1.0);
    }
    let (w, h) = (560.0, 400.0);
    let frame = Frame { left: 70.0, top: 40.0, width: w - 220.0, height: h - 100.0, b };
    let mut s = header(w, h);
    frame.axes(&mut s, title, xlabel, ylabel);
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> =
            ser.xs.iter().zip(&ser.ys).map(|(x, y)| format!("{},{}", f(frame.px(*x)), f(frame.py(*y)))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            path.join(" ")
        );
        let ly = frame.top + 12.0 + 16.0 * k as f64;
        let lx = frame.left + frame.width + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="{color}" stroke-width="2"/><text x="{3}" y="{4}" font-size="11">{5}</text>"#,
            f(lx),
            f(ly),
            f(lx + 18.0),
            f(lx + 24.0),
            f(ly + 4.0),
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}
