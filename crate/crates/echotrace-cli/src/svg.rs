//! Self-contained SVG rendering for evaluation reports: a precision–recall
//! panel with the ODS point marked, and an echogram panel with ground-truth
//! and predicted layers drawn as polylines.

use std::fmt::Write;

use echotrace::data::LayerSet;
use echotrace::eval::EvalReport;
use echotrace::Grid64;

const PR_X: f64 = 58.0;
const PR_Y: f64 = 44.0;
const PR_SIZE: f64 = 330.0;
const IMG_X: f64 = 470.0;
const IMG_Y: f64 = 44.0;
const IMG_MAX_W: f64 = 460.0;
const IMG_MAX_H: f64 = 330.0;
const HEIGHT: f64 = 440.0;
const GRAY_LEVELS: usize = 16;

pub fn render_report(
    report: &EvalReport,
    image: &Grid64,
    gt: &LayerSet,
    pred: Option<&LayerSet>,
) -> String {
    let shape = image.shape();
    let sx = (IMG_MAX_W / shape.cols as f64).min(IMG_MAX_H / shape.rows as f64);
    let img_w = sx * shape.cols as f64;
    let img_h = sx * shape.rows as f64;
    let width = IMG_X + img_w + 20.0;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{HEIGHT:.0}" viewBox="0 0 {width:.0} {HEIGHT:.0}">"#
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    pr_panel(&mut s, report);
    echogram_panel(&mut s, image, gt, pred, sx, img_w, img_h);
    s.push_str("</svg>\n");
    s
}

fn pr_x(recall: f64) -> f64 {
    PR_X + recall.clamp(0.0, 1.0) * PR_SIZE
}

fn pr_y(precision: f64) -> f64 {
    PR_Y + (1.0 - precision.clamp(0.0, 1.0)) * PR_SIZE
}

fn pr_panel(s: &mut String, report: &EvalReport) {
    let _ = writeln!(
        s,
        r##"<text x="{:.1}" y="24" font-family="sans-serif" font-size="15" fill="#333">precision-recall</text>"##,
        PR_X
    );
    for i in 0..=4 {
        let frac = i as f64 / 4.0;
        let (x, y) = (pr_x(frac), pr_y(frac));
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{PR_Y:.1}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            PR_Y + PR_SIZE
        );
        let _ = writeln!(
            s,
            r##"<line x1="{PR_X:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##,
            PR_X + PR_SIZE
        );
        let _ = writeln!(
            s,
            r##"<text x="{x:.1}" y="{:.1}" font-family="sans-serif" font-size="11" fill="#666" text-anchor="middle">{frac:.2}</text>"##,
            PR_Y + PR_SIZE + 16.0
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" fill="#666" text-anchor="end">{frac:.2}</text>"##,
            PR_X - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r##"<rect x="{PR_X:.1}" y="{PR_Y:.1}" width="{PR_SIZE:.1}" height="{PR_SIZE:.1}" fill="none" stroke="#333"/>"##
    );
    let _ = writeln!(
        s,
        r##"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" fill="#333" text-anchor="middle">recall</text>"##,
        PR_X + PR_SIZE / 2.0,
        PR_Y + PR_SIZE + 34.0
    );
    let _ = writeln!(
        s,
        r##"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" fill="#333" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">precision</text>"##,
        PR_X - 36.0,
        PR_Y + PR_SIZE / 2.0,
        PR_X - 36.0,
        PR_Y + PR_SIZE / 2.0
    );

    if !report.pr_curve.is_empty() {
        let mut points = String::new();
        for p in &report.pr_curve {
            let _ = write!(points, "{:.2},{:.2} ", pr_x(p.recall), pr_y(p.precision));
        }
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="1.8"/>"##,
            points.trim_end()
        );
    }

    let ods = report
        .pr_curve
        .iter()
        .min_by(|a, b| {
            let da = (a.threshold - report.ods.threshold).abs();
            let db = (b.threshold - report.ods.threshold).abs();
            da.total_cmp(&db)
        })
        .map(|p| (p.recall, p.precision));
    if let Some((r, p)) = ods {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="4.5" fill="#d62728"/>"##,
            pr_x(r),
            pr_y(p)
        );
    }
    let mae = report
        .mae_overall
        .map_or(String::new(), |m| format!(", layer MAE {m:.2} px"));
    let _ = writeln!(
        s,
        r##"<text x="{PR_X:.1}" y="{:.1}" font-family="sans-serif" font-size="12" fill="#d62728">ODS F {:.3} at t {:.3}, OIS {:.3}, AP {:.3}{mae}</text>"##,
        PR_Y + PR_SIZE + 52.0,
        report.ods.f,
        report.ods.threshold,
        report.ois,
        report.ap
    );
}

fn echogram_panel(
    s: &mut String,
    image: &Grid64,
    gt: &LayerSet,
    pred: Option<&LayerSet>,
    sx: f64,
    img_w: f64,
    img_h: f64,
) {
    let _ = writeln!(
        s,
        r##"<text x="{IMG_X:.1}" y="24" font-family="sans-serif" font-size="15" fill="#333">echogram</text>"##
    );
    raster(s, image, sx);
    let _ = writeln!(
        s,
        r##"<rect x="{IMG_X:.1}" y="{IMG_Y:.1}" width="{img_w:.1}" height="{img_h:.1}" fill="none" stroke="#333"/>"##
    );
    for layer in &gt.layers {
        polyline(s, layer.points.iter().map(|(&c, &r)| (c, r)), sx, "#000000", 1.6);
    }
    if let Some(pred) = pred {
        for layer in &pred.layers {
            polyline(s, layer.points.iter().map(|(&c, &r)| (c, r)), sx, "#ff7f0e", 1.2);
        }
    }
    let legend_y = IMG_Y + img_h + 18.0;
    let _ = writeln!(
        s,
        r##"<text x="{IMG_X:.1}" y="{legend_y:.1}" font-family="sans-serif" font-size="12" fill="#333">ground truth black{}</text>"##,
        if pred.is_some() { ", predicted orange" } else { "" }
    );
}

/// Draws the echogram as grayscale rects, merging equal-level runs per row to
/// keep the file compact.
fn raster(s: &mut String, image: &Grid64, sx: f64) {
    let shape = image.shape();
    let plane = image.plane(0, 0);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in plane {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let level = |v: f64| {
        (((v - lo) / span * (GRAY_LEVELS - 1) as f64).round() as usize).min(GRAY_LEVELS - 1)
    };

    for r in 0..shape.rows {
        let row = &plane[r * shape.cols..(r + 1) * shape.cols];
        let mut c = 0;
        while c < shape.cols {
            let lvl = level(row[c]);
            let mut end = c + 1;
            while end < shape.cols && level(row[end]) == lvl {
                end += 1;
            }
            let gray = (lvl * 255 / (GRAY_LEVELS - 1)) as u8;
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#{gray:02x}{gray:02x}{gray:02x}"/>"##,
                IMG_X + c as f64 * sx,
                IMG_Y + r as f64 * sx,
                (end - c) as f64 * sx,
                sx
            );
            c = end;
        }
    }
}

fn polyline(
    s: &mut String,
    points: impl Iterator<Item = (usize, f64)>,
    sx: f64,
    color: &str,
    width: f64,
) {
    let mut attr = String::new();
    for (c, r) in points {
        let _ = write!(
            attr,
            "{:.2},{:.2} ",
            IMG_X + (c as f64 + 0.5) * sx,
            IMG_Y + (r + 0.5) * sx
        );
    }
    if attr.is_empty() {
        return;
    }
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{width}"/>"##,
        attr.trim_end()
    );
}
