//! Minimal SVG plotting: scatter, line and histogram layers on linear axes.
//!
//! Every figure the CLI draws is also written as CSV, so these plots only
//! need to be legible, not pretty.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::Result;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 72.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 36.0;
const MARGIN_BOTTOM: f64 = 52.0;

pub const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#7f7f7f"];

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Points { xy: Vec<[f64; 2]>, color: String, radius: f64, opacity: f64 },
    Line { xy: Vec<[f64; 2]>, color: String, width: f64, opacity: f64 },
    Bars { bins: Vec<(f64, f64, f64)>, color: String },
}

/// A single panel with linear axes fitted to its layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Plot {
    title: String,
    x_label: String,
    y_label: String,
    layers: Vec<Layer>,
    y_from_zero: bool,
}

impl Plot {
    pub fn new(title: impl Into<String>, x_label: impl Into<String>, y_label: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            ..Self::default()
        }
    }

    /// Forces the y axis to include zero.
    pub fn y_from_zero(mut self) -> Self {
        self.y_from_zero = true;
        self
    }

    pub fn points(&mut self, xy: impl IntoIterator<Item = [f64; 2]>, color: &str, radius: f64, opacity: f64) {
        self.layers.push(Layer::Points {
            xy: xy.into_iter().filter(|p| p[0].is_finite() && p[1].is_finite()).collect(),
            color: color.into(),
            radius,
            opacity,
        });
    }

    pub fn line(&mut self, xy: impl IntoIterator<Item = [f64; 2]>, color: &str, width: f64, opacity: f64) {
        self.layers.push(Layer::Line {
            xy: xy.into_iter().filter(|p| p[0].is_finite() && p[1].is_finite()).collect(),
            color: color.into(),
            width,
            opacity,
        });
    }

    /// Histogram bars as `(lower, upper, height)`.
    pub fn bars(&mut self, bins: impl IntoIterator<Item = (f64, f64, f64)>, color: &str) {
        self.layers.push(Layer::Bars {
            bins: bins.into_iter().collect(),
            color: color.into(),
        });
        self.y_from_zero = true;
    }

    fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let mut x = [f64::INFINITY, f64::NEG_INFINITY];
        let mut y = [f64::INFINITY, f64::NEG_INFINITY];
        let mut add = |px: f64, py: f64| {
            x = [x[0].min(px), x[1].max(px)];
            y = [y[0].min(py), y[1].max(py)];
        };
        for l in &self.layers {
            match l {
                Layer::Points { xy, .. } | Layer::Line { xy, .. } => xy.iter().for_each(|p| add(p[0], p[1])),
                Layer::Bars { bins, .. } => bins.iter().for_each(|b| {
                    add(b.0, b.2);
                    add(b.1, b.2);
                }),
            }
        }
        if self.y_from_zero {
            y[0] = y[0].min(0.0);
        }
        (pad(x), pad(y))
    }

    pub fn render(&self) -> String {
        let (xr, yr) = self.bounds();
        let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let sx = |v: f64| MARGIN_LEFT + (v - xr[0]) / (xr[1] - xr[0]) * pw;
        let sy = |v: f64| MARGIN_TOP + ph - (v - yr[0]) / (yr[1] - yr[0]) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );

        for t in ticks(xr) {
            let px = sx(t);
            let _ = writeln!(
                s,
                r##"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="#e0e0e0"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                MARGIN_TOP,
                MARGIN_TOP + ph,
                MARGIN_TOP + ph + 16.0,
                tick_label(t)
            );
        }
        for t in ticks(yr) {
            let py = sy(t);
            let _ = writeln!(
                s,
                r##"<line x1="{:.2}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#e0e0e0"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                MARGIN_LEFT,
                MARGIN_LEFT + pw,
                MARGIN_LEFT - 6.0,
                py + 4.0,
                tick_label(t)
            );
        }
        let _ = writeln!(
            s,
            r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );

        for l in &self.layers {
            match l {
                Layer::Bars { bins, color } => {
                    for &(lo, hi, h) in bins {
                        let (x0, x1) = (sx(lo), sx(hi));
                        let (y0, y1) = (sy(h.max(0.0)), sy(0.0_f64.max(yr[0])));
                        let _ = writeln!(
                            s,
                            r#"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.7" stroke="white"/>"#,
                            (x1 - x0).max(0.0),
                            (y1 - y0).max(0.0)
                        );
                    }
                }
                Layer::Line { xy, color, width, opacity } => {
                    if xy.len() < 2 {
                        continue;
                    }
                    let pts: Vec<String> = xy.iter().map(|p| format!("{:.2},{:.2}", sx(p[0]), sy(p[1]))).collect();
                    let _ = writeln!(
                        s,
                        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{width}" stroke-opacity="{opacity}"/>"#,
                        pts.join(" ")
                    );
                }
                Layer::Points { xy, color, radius, opacity } => {
                    for p in xy {
                        let _ = writeln!(
                            s,
                            r#"<circle cx="{:.2}" cy="{:.2}" r="{radius}" fill="{color}" fill-opacity="{opacity}"/>"#,
                            sx(p[0]),
                            sy(p[1])
                        );
                    }
                }
            }
        }

        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            MARGIN_LEFT + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            MARGIN_TOP + ph / 2.0,
            MARGIN_TOP + ph / 2.0,
            escape(&self.y_label)
        );
        s.push_str("</svg>\n");
        s
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.render().as_bytes())?;
        Ok(())
    }
}

fn pad(r: [f64; 2]) -> [f64; 2] {
    if !r[0].is_finite() || !r[1].is_finite() {
        return [0.0, 1.0];
    }
    let span = r[1] - r[0];
    if span <= 0.0 {
        let d = if r[0] == 0.0 { 1.0 } else { r[0].abs() * 0.1 };
        return [r[0] - d, r[1] + d];
    }
    [r[0] - 0.04 * span, r[1] + 0.04 * span]
}

/// Roughly five round-numbered ticks inside `r`.
fn ticks(r: [f64; 2]) -> Vec<f64> {
    let raw = (r[1] - r[0]) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (r[0] / step).ceil() as i64;
    let last = (r[1] / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.6}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_are_round_and_inside() {
        let t = ticks([0.0, 1.0]);
        assert_eq!(t.len(), 6);
        assert!((t[3] - 0.6).abs() < 1e-12);
        assert!(ticks([0.00031, 0.00052]).iter().all(|v| (0.00031..=0.00052).contains(v)));
    }

    #[test]
    fn render_has_one_element_per_point_and_bar() {
        let mut p = Plot::new("t", "x", "y");
        p.points([[0.0, 1.0], [1.0, 2.0], [f64::NAN, 0.0]], PALETTE[0], 2.0, 0.5);
        p.bars([(0.0, 1.0, 3.0), (1.0, 2.0, 1.0)], PALETTE[1]);
        p.line([[0.0, 0.0], [2.0, 2.0]], PALETTE[2], 1.0, 1.0);
        let s = p.render();
        assert_eq!(s.matches("<circle").count(), 2);
        assert_eq!(s.matches("<polyline").count(), 1);
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
    }

    #[test]
    fn empty_and_flat_plots_still_render() {
        assert!(Plot::new("", "", "").render().contains("</svg>"));
        let mut p = Plot::new("a<b", "", "");
        p.line([[1.0, 5.0], [1.0, 5.0]], "black", 1.0, 1.0);
        let s = p.render();
        assert!(s.contains("a&lt;b") && !s.contains("NaN"));
    }
}
