//! Static SVG figures: line plots (optionally log-scaled) and heatmap panels.

use crate::container::{write_atomic, ContainerError};
use std::fmt::Write as _;
use std::path::Path;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            points,
            dashed: false,
        }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }
}

/// A vertical marker line, drawn dashed.
#[derive(Debug, Clone)]
pub struct Marker {
    pub x: f64,
    pub label: String,
}

#[derive(Debug, Clone, Default)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
    pub markers: Vec<Marker>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn extent(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return None;
    }
    if hi - lo < 1e-300 {
        let pad = if lo.abs() > 0.0 { lo.abs() * 0.1 } else { 1.0 };
        return Some((lo - pad, hi + pad));
    }
    Some((lo, hi))
}

impl LinePlot {
    pub fn to_svg(&self) -> String {
        // Log scaling needs strictly positive data; fall back to linear otherwise.
        let log_y = self.log_y
            && self
                .series
                .iter()
                .flat_map(|s| &s.points)
                .any(|&(_, y)| y > 0.0 && y.is_finite());
        let ty = |y: f64| if log_y { y.log10() } else { y };
        let keep = |y: f64| !log_y || y > 0.0;

        let xs = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.0))
            .chain(self.markers.iter().map(|m| m.x));
        let (x0, x1) = extent(xs).unwrap_or((0.0, 1.0));
        let ys = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.1))
            .filter(|&y| keep(y))
            .map(ty);
        let (y0, y1) = extent(ys).unwrap_or((0.0, 1.0));
        let (y0, y1) = if log_y { (y0.floor(), y1.ceil().max(y0.floor() + 1.0)) } else { (y0, y1) };

        let pw = WIDTH - MARGIN_L - MARGIN_R;
        let ph = HEIGHT - MARGIN_T - MARGIN_B;
        let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
        let py = |y: f64| MARGIN_T + (1.0 - (ty(y) - y0) / (y1 - y0)) * ph;

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            svg,
            r#"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );

        for i in 0..=4 {
            let fx = x0 + (x1 - x0) * i as f64 / 4.0;
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                px(fx),
                HEIGHT - MARGIN_B + 16.0,
                tick(fx)
            );
        }
        if log_y {
            for e in (y0 as i64)..=(y1 as i64) {
                let y = MARGIN_T + (1.0 - (e as f64 - y0) / (y1 - y0)) * ph;
                let _ = writeln!(
                    svg,
                    r##"<line x1="{MARGIN_L}" x2="{:.1}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">1e{e}</text>"##,
                    MARGIN_L + pw,
                    MARGIN_L - 6.0,
                    y + 4.0
                );
            }
        } else {
            for i in 0..=4 {
                let fy = y0 + (y1 - y0) * i as f64 / 4.0;
                let y = MARGIN_T + (1.0 - i as f64 / 4.0) * ph;
                let _ = writeln!(
                    svg,
                    r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                    MARGIN_L - 6.0,
                    y + 4.0,
                    tick(fy)
                );
            }
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            MARGIN_L + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            svg,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            MARGIN_T + ph / 2.0,
            MARGIN_T + ph / 2.0,
            escape(&self.y_label)
        );

        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(|&&(x, y)| x.is_finite() && y.is_finite() && keep(y))
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
                pts.join(" ")
            );
            let ly = MARGIN_T + 14.0 + 16.0 * i as f64;
            let _ = writeln!(
                svg,
                r#"<line x1="{:.1}" x2="{:.1}" y1="{ly:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.1}" y="{:.1}">{}</text>"#,
                MARGIN_L + pw - 150.0,
                MARGIN_L + pw - 126.0,
                MARGIN_L + pw - 120.0,
                ly + 4.0,
                escape(&s.label)
            );
        }

        for m in &self.markers {
            let x = px(m.x);
            let _ = writeln!(
                svg,
                r#"<line class="marker" x1="{x:.2}" x2="{x:.2}" y1="{MARGIN_T}" y2="{:.1}" stroke="black" stroke-dasharray="5 5"/>"#,
                MARGIN_T + ph
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#,
                x + 4.0,
                MARGIN_T + ph - 8.0,
                escape(&m.label)
            );
        }
        svg.push_str("</svg>\n");
        svg
    }

    pub fn write(&self, path: &Path) -> Result<(), ContainerError> {
        write_atomic(path, self.to_svg().as_bytes())
    }
}

fn tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        format!("{:.3}", v).trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// One image in a heatmap figure; `data` is row-major `[ny][nx]`.
#[derive(Debug, Clone)]
pub struct Panel<'a> {
    pub title: String,
    pub data: &'a [f64],
}

/// Maps t ∈ [0, 1] to a blue–white–red diverging color.
fn diverging(t: f64) -> (u8, u8, u8) {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64, s: f64| (a + (b - a) * s).round() as u8;
    if t < 0.5 {
        let s = t / 0.5;
        (lerp(59.0, 247.0, s), lerp(76.0, 247.0, s), lerp(192.0, 247.0, s))
    } else {
        let s = (t - 0.5) / 0.5;
        (lerp(247.0, 180.0, s), lerp(247.0, 4.0, s), lerp(247.0, 38.0, s))
    }
}

/// Side-by-side heatmaps, each with its own symmetric color range.
pub fn heatmap_panels(title: &str, panels: &[Panel<'_>], nx: usize, ny: usize) -> String {
    const CELL_AREA: f64 = 220.0;
    const GAP: f64 = 30.0;
    let cw = CELL_AREA / nx as f64;
    let ch = CELL_AREA / ny as f64;
    let width = GAP + panels.len() as f64 * (CELL_AREA + GAP);
    let height = CELL_AREA + 90.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12" shape-rendering="crispEdges">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    for (p, panel) in panels.iter().enumerate() {
        let ox = GAP + p as f64 * (CELL_AREA + GAP);
        let oy = 50.0;
        let amp = panel
            .data
            .iter()
            .filter(|v| v.is_finite())
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-300);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            ox + CELL_AREA / 2.0,
            oy - 8.0,
            escape(&panel.title)
        );
        for j in 0..ny {
            for i in 0..nx {
                let v = panel.data[j * nx + i];
                let (r, g, b) = diverging(0.5 + 0.5 * v / amp);
                // Row j = 0 is the bottom of the domain.
                let _ = writeln!(
                    svg,
                    r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({r},{g},{b})"/>"#,
                    ox + i as f64 * cw,
                    oy + (ny - 1 - j) as f64 * ch,
                    cw + 0.05,
                    ch + 0.05
                );
            }
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">range ±{}</text>"#,
            ox + CELL_AREA / 2.0,
            oy + CELL_AREA + 18.0,
            tick(amp)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_heatmap_panels(
    path: &Path,
    title: &str,
    panels: &[Panel<'_>],
    nx: usize,
    ny: usize,
) -> Result<(), ContainerError> {
    write_atomic(path, heatmap_panels(title, panels, nx, ny).as_bytes())
}
