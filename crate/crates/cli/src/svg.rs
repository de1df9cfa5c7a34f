//! Minimal SVG plots: axes, points, polylines, step paths and histogram bars.
//!
//! Plots are a convenience; the CSV files are the data contract.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Style {
    Points,
    Line,
    /// Right-continuous step path (trajectories).
    Step,
    /// Bars from `y = 0`; each x is a left edge and `width` the bin width.
    Bars { width: f64 },
}

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub style: Style,
    pub data: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, style: Style, data: Vec<(f64, f64)>) -> Self {
        Self { label: label.into(), style, data }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Plot {
    pub title: String,
    pub xlabel: String,
    pub ylabel: String,
    pub series: Vec<Series>,
    /// Reference point drawn as a cross (e.g. the true parameter).
    pub marker: Option<(f64, f64)>,
    /// Horizontal reference lines.
    pub hlines: Vec<f64>,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * (1.0 + lo.abs()) {
        return (lo - 0.5 - 0.05 * lo.abs(), hi + 0.5 + 0.05 * hi.abs());
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Plot {
    pub fn new(title: impl Into<String>, xlabel: impl Into<String>, ylabel: impl Into<String>) -> Self {
        Self { title: title.into(), xlabel: xlabel.into(), ylabel: ylabel.into(), ..Self::default() }
    }

    pub fn with(mut self, series: Series) -> Self {
        self.series.push(series);
        self
    }

    fn frame(&self) -> Frame {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for s in &self.series {
            for &(x, y) in s.data.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
                xs.push(x);
                ys.push(y);
                if let Style::Bars { width } = s.style {
                    xs.push(x + width);
                    ys.push(0.0);
                }
            }
        }
        if let Some((x, y)) = self.marker {
            xs.push(x);
            ys.push(y);
        }
        ys.extend(&self.hlines);
        let range = |v: &[f64]| padded(v.iter().copied().fold(f64::INFINITY, f64::min), v.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let (x0, x1) = range(&xs);
        let (y0, y1) = range(&ys);
        Frame { x0, x1, y0, y1 }
    }

    pub fn render(&self) -> String {
        let f = self.frame();
        let mut out = String::new();
        let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(&self.title));
        // Axes with min/mid/max ticks.
        let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
        let _ = writeln!(out, r#"<path d="M{left} {top} V{bottom} H{right}" stroke="black" fill="none"/>"#);
        for i in 0..=4 {
            let u = i as f64 / 4.0;
            let x = f.x0 + u * (f.x1 - f.x0);
            let y = f.y0 + u * (f.y1 - f.y0);
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, f.px(x), bottom + 16.0, tick(x));
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, left - 6.0, f.py(y) + 4.0, tick(y));
        }
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 18.0, escape(&self.xlabel));
        let _ = writeln!(
            out,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(&self.ylabel)
        );
        for y in &self.hlines {
            let _ = writeln!(out, r#"<line x1="{left}" x2="{right}" y1="{0:.1}" y2="{0:.1}" stroke="gray" stroke-dasharray="4 3"/>"#, f.py(*y));
        }
        for (idx, s) in self.series.iter().enumerate() {
            let color = PALETTE[idx % PALETTE.len()];
            let pts: Vec<(f64, f64)> = s.data.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
            match s.style {
                Style::Points => {
                    for (x, y) in &pts {
                        let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="2" fill="{color}" fill-opacity="0.6"/>"#, f.px(*x), f.py(*y));
                    }
                }
                Style::Line | Style::Step => {
                    let mut d = String::new();
                    for (i, (x, y)) in pts.iter().enumerate() {
                        if i == 0 {
                            let _ = write!(d, "M{:.1} {:.1}", f.px(*x), f.py(*y));
                        } else if s.style == Style::Step {
                            let _ = write!(d, " H{:.1} V{:.1}", f.px(*x), f.py(*y));
                        } else {
                            let _ = write!(d, " L{:.1} {:.1}", f.px(*x), f.py(*y));
                        }
                    }
                    let _ = writeln!(out, r#"<path d="{d}" stroke="{color}" fill="none" stroke-width="1.2"/>"#);
                }
                Style::Bars { width } => {
                    for (x, y) in &pts {
                        let (xa, xb) = (f.px(*x), f.px(x + width));
                        let (ya, yb) = (f.py(y.max(0.0)), f.py(0.0));
                        let _ = writeln!(
                            out,
                            r#"<rect x="{xa:.1}" y="{ya:.1}" width="{:.1}" height="{:.1}" fill="{color}" fill-opacity="0.5" stroke="{color}"/>"#,
                            (xb - xa).max(0.0),
                            (yb - ya).max(0.0)
                        );
                    }
                }
            }
            let ly = top + 14.0 * idx as f64;
            let _ = writeln!(out, r#"<rect x="{}" y="{:.1}" width="10" height="10" fill="{color}"/>"#, right - 150.0, ly - 9.0);
            let _ = writeln!(out, r#"<text x="{}" y="{ly:.1}">{}</text>"#, right - 135.0, escape(&s.label));
        }
        if let Some((x, y)) = self.marker {
            let (cx, cy) = (f.px(x), f.py(y));
            let _ = writeln!(
                out,
                r#"<path d="M{:.1} {cy:.1} H{:.1} M{cx:.1} {:.1} V{:.1}" stroke="black" stroke-width="2"/>"#,
                cx - 8.0,
                cx + 8.0,
                cy - 8.0,
                cy + 8.0
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e5).contains(&a) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}
