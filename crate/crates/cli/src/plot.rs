//! Self-contained SVG scatter and density plots.

use std::fmt::Write as _;

use cuot::metrics::{Extent, KdeGrid};

const PANEL: f64 = 320.0;
const PAD: f64 = 28.0;

pub struct Panel<'a> {
    pub title: &'a str,
    pub points: &'a [[f64; 2]],
    pub color: &'a str,
}

/// Bounding box of all point sets, widened by 5% on each side.
pub fn extent_of(sets: &[&[[f64; 2]]]) -> Extent {
    let mut e = Extent {
        x0: f64::INFINITY,
        x1: f64::NEG_INFINITY,
        y0: f64::INFINITY,
        y1: f64::NEG_INFINITY,
    };
    for p in sets.iter().flat_map(|s| s.iter()) {
        e.x0 = e.x0.min(p[0]);
        e.x1 = e.x1.max(p[0]);
        e.y0 = e.y0.min(p[1]);
        e.y1 = e.y1.max(p[1]);
    }
    let mx = 0.05 * (e.x1 - e.x0).max(1e-9);
    let my = 0.05 * (e.y1 - e.y0).max(1e-9);
    Extent {
        x0: e.x0 - mx,
        x1: e.x1 + mx,
        y0: e.y0 - my,
        y1: e.y1 + my,
    }
}

fn header(out: &mut String, panels: usize) {
    let w = panels as f64 * (PANEL + PAD) + PAD;
    let h = PANEL + 2.0 * PAD;
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
}

fn frame(out: &mut String, k: usize, title: &str) -> (f64, f64) {
    let ox = PAD + k as f64 * (PANEL + PAD);
    let oy = PAD;
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        ox + PANEL / 2.0,
        oy - 8.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{ox:.1}" y="{oy:.1}" width="{PANEL:.0}" height="{PANEL:.0}" fill="none" stroke="#444"/>"##
    );
    (ox, oy)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// One square panel per point set, sharing `extent`.
pub fn scatter_svg(panels: &[Panel<'_>], extent: Extent) -> String {
    let mut out = String::new();
    header(&mut out, panels.len());
    let sx = PANEL / (extent.x1 - extent.x0);
    let sy = PANEL / (extent.y1 - extent.y0);
    for (k, p) in panels.iter().enumerate() {
        let (ox, oy) = frame(&mut out, k, p.title);
        let _ = writeln!(out, r#"<g fill="{}" fill-opacity="0.35">"#, p.color);
        for q in p.points {
            let x = ox + (q[0] - extent.x0) * sx;
            let y = oy + PANEL - (q[1] - extent.y0) * sy;
            if (ox..=ox + PANEL).contains(&x) && (oy..=oy + PANEL).contains(&y) {
                let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.2"/>"#);
            }
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

/// Piecewise-linear dark-blue → teal → yellow ramp on `[0, 1]`.
fn ramp(t: f64) -> (u8, u8, u8) {
    const STOPS: [(f64, [f64; 3]); 4] = [
        (0.0, [255.0, 255.0, 255.0]),
        (0.2, [59.0, 82.0, 139.0]),
        (0.6, [33.0, 145.0, 140.0]),
        (1.0, [253.0, 231.0, 37.0]),
    ];
    let t = t.clamp(0.0, 1.0);
    let i = STOPS
        .iter()
        .rposition(|s| s.0 <= t)
        .unwrap_or(0)
        .min(STOPS.len() - 2);
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let f = (t - a.0) / (b.0 - a.0);
    let c = |k: usize| (a.1[k] + f * (b.1[k] - a.1[k])).round() as u8;
    (c(0), c(1), c(2))
}

/// Heatmaps of each grid, each normalized to its own maximum.
pub fn kde_svg(grids: &[(&str, &KdeGrid)]) -> String {
    let mut out = String::new();
    header(&mut out, grids.len());
    for (k, (title, grid)) in grids.iter().enumerate() {
        let (ox, oy) = frame(&mut out, k, title);
        let cw = PANEL / grid.nx as f64;
        let ch = PANEL / grid.ny as f64;
        let peak = grid.max().max(f64::MIN_POSITIVE);
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let (r, g, b) = ramp(grid.at(ix, iy) / peak);
                let x = ox + ix as f64 * cw;
                let y = oy + PANEL - (iy + 1) as f64 * ch;
                let _ = writeln!(
                    out,
                    r##"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="#{r:02x}{g:02x}{b:02x}"/>"##,
                    cw + 0.05,
                    ch + 0.05
                );
            }
        }
    }
    out.push_str("</svg>\n");
    out
}
