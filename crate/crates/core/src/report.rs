//! CSV and SVG reports of FROC curves.
//!
//! FROC CSV columns, in order: `scan_id, threshold, tp, fp, fn, sensitivity,
//! dice`. FP is the per-scan false-positive voxel count inside the ROI.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{optimal_threshold, FrocCurve, FrocPoint};

pub const FROC_CSV_HEADER: &str = "scan_id,threshold,tp,fp,fn,sensitivity,dice";

pub fn froc_csv<'a>(curves: impl IntoIterator<Item = (&'a str, &'a FrocCurve)>) -> String {
    let mut s = format!("{FROC_CSV_HEADER}\n");
    for (id, c) in curves {
        for p in &c.points {
            let _ = writeln!(
                s,
                "{id},{},{},{},{},{:.6},{:.6}",
                p.threshold, p.tp, p.fp, p.fn_, p.sensitivity, p.dice
            );
        }
    }
    s
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 52.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Pixel position of a curve point on the plot.
pub fn plot_position(p: &FrocPoint, fp_max: usize) -> (f64, f64) {
    let fx = if fp_max == 0 { 0.0 } else { p.fp as f64 / fp_max as f64 };
    let x = LEFT + fx * (W - LEFT - RIGHT);
    let y = TOP + (1.0 - p.sensitivity) * (H - TOP - BOTTOM);
    (x, y)
}

/// Standalone SVG: sensitivity against FP count, circle at threshold 0.5,
/// triangle at the corner-optimal threshold (one triangle if they coincide).
pub fn froc_svg(c: &FrocCurve, title: &str) -> Result<String> {
    if c.points.is_empty() {
        return Err(Error::domain("cannot plot an empty FROC curve"));
    }
    let fp_max = c.points.iter().map(|p| p.fp).max().unwrap_or(0);
    let t_opt = optimal_threshold(c)?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let (x0, y0, x1, y1) = (LEFT, H - BOTTOM, W - RIGHT, TOP);
    let _ = writeln!(
        s,
        r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let y = y0 - f * (y0 - y1);
        let x = x0 + f * (x1 - x0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{f:.2}</text>"#,
            x0 - 6.0,
            y + 3.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="middle" font-size="10">{}</text>"#,
            y0 + 14.0,
            (f * fp_max as f64).round()
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">false positives (voxels per scan)</text>"#,
        (x0 + x1) / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {})">sensitivity</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    let pts: Vec<String> = c
        .points
        .iter()
        .map(|p| {
            let (x, y) = plot_position(p, fp_max);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#,
        pts.join(" ")
    );
    let opt = c.points.iter().find(|p| p.threshold == t_opt).expect("optimum lies on the curve");
    if let Some(half) = c.points.iter().find(|p| p.threshold == 0.5 && p.threshold != t_opt) {
        let (x, y) = plot_position(half, fp_max);
        let _ = writeln!(
            s,
            r#"<circle id="threshold-0.5" data-threshold="0.5" cx="{x:.2}" cy="{y:.2}" r="4" fill="none" stroke="black"/>"#
        );
    }
    let (x, y) = plot_position(opt, fp_max);
    let _ = writeln!(
        s,
        r#"<path id="threshold-optimal" data-threshold="{t_opt}" data-x="{x:.2}" data-y="{y:.2}" d="M{:.2} {:.2} L{:.2} {:.2} L{:.2} {:.2} Z" fill="crimson"/>"#,
        x,
        y - 5.0,
        x - 4.5,
        y + 4.0,
        x + 4.5,
        y + 4.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="10">t={t_opt} Dice={:.3}</text>"#,
        x + 7.0,
        y - 6.0,
        opt.dice
    );
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_froc_svg(c: &FrocCurve, title: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, froc_svg(c, title)?).map_err(|e| Error::io(path, e))
}
