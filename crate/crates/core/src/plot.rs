//! SVG trajectory overlays.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::metrics::Point;

const SIZE: f64 = 800.0;
const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Plot frame: the truth bounding box grown by 10% on every side, scaled
/// uniformly into a `SIZE`-pixel square with y pointing up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Viewport {
    pub min: Point,
    pub max: Point,
}

impl Viewport {
    pub fn around(truth: &[Point]) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::Domain("cannot plot an empty trajectory".into()));
        }
        if truth.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Domain("non-finite truth position".into()));
        }
        let mut min = truth[0];
        let mut max = truth[0];
        for p in truth {
            for i in 0..2 {
                min[i] = min[i].min(p[i]);
                max[i] = max[i].max(p[i]);
            }
        }
        let span = (max[0] - min[0]).max(max[1] - min[1]).max(1.0);
        for i in 0..2 {
            let c = 0.5 * (min[i] + max[i]);
            min[i] = c - 0.6 * span;
            max[i] = c + 0.6 * span;
        }
        Ok(Viewport { min, max })
    }

    pub fn to_pixels(&self, p: &Point) -> (f64, f64) {
        let s = SIZE / (self.max[0] - self.min[0]);
        ((p[0] - self.min[0]) * s, (self.max[1] - p[1]) * s)
    }
}

fn polyline(out: &mut String, vp: &Viewport, pts: &[Point], color: &str) {
    let _ = write!(
        out,
        r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points=""#
    );
    for (i, p) in pts.iter().filter(|p| p[0].is_finite() && p[1].is_finite()).enumerate() {
        let (x, y) = vp.to_pixels(p);
        let _ = write!(out, "{}{x:.2},{y:.2}", if i == 0 { "" } else { " " });
    }
    out.push_str("\"/>\n");
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Truth in black, each named estimate in its own colour, with a legend and
/// a one-metre scale bar.
pub fn trajectory_svg(truth: &[Point], estimates: &[(&str, &[Point])]) -> Result<String> {
    let vp = Viewport::around(truth)?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    polyline(&mut out, &vp, truth, "black");
    for (i, (_, pts)) in estimates.iter().enumerate() {
        polyline(&mut out, &vp, pts, PALETTE[i % PALETTE.len()]);
    }
    let entries = std::iter::once(("truth", "black")).chain(
        estimates
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (*n, PALETTE[i % PALETTE.len()])),
    );
    for (i, (name, color)) in entries.enumerate() {
        let y = 20.0 + 18.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="10" y1="{y}" x2="30" y2="{y}" stroke="{color}" stroke-width="3"/><text x="36" y="{}" font-family="sans-serif" font-size="13">{}</text>"#,
            y + 4.0,
            escape(name)
        );
    }
    let metre = SIZE / (vp.max[0] - vp.min[0]);
    let _ = writeln!(
        out,
        r#"<line x1="10" y1="{y}" x2="{:.2}" y2="{y}" stroke="black" stroke-width="2"/><text x="10" y="{}" font-family="sans-serif" font-size="11">1 m</text>"#,
        10.0 + metre,
        SIZE - 18.0,
        y = SIZE - 10.0
    );
    out.push_str("</svg>\n");
    Ok(out)
}
