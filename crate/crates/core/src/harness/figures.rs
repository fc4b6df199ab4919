use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::grid::GridReport;
use super::train::TrainingCurve;
use crate::error::{Error, Result};
use crate::explain::Explanation;
use crate::image::{to_u8, Image, SIDE};
use crate::metrics::EacReport;

const OUTLINE: Rgb<u8> = Rgb([220, 40, 40]);

/// The query followed by every decoded state, left to right, with a red
/// border drawn inside the query's cell.
pub fn explanation_strip(query: &Image, states: &[Image]) -> RgbImage {
    let cells: Vec<&Image> = std::iter::once(query).chain(states).collect();
    let side = SIDE as u32;
    let mut out = RgbImage::new(side * cells.len() as u32, side);
    for (k, img) in cells.iter().enumerate() {
        for r in 0..SIDE {
            for c in 0..SIDE {
                let v = to_u8(img.get(r, c));
                out.put_pixel(k as u32 * side + c as u32, r as u32, Rgb([v, v, v]));
            }
        }
    }
    for i in 0..side {
        for (x, y) in [(i, 0), (i, side - 1), (0, i), (side - 1, i)] {
            out.put_pixel(x, y, OUTLINE);
        }
    }
    out
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

fn write(path: &Path, s: &str) -> Result<()> {
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 40.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <text x=\"{}\" y=\"16\" text-anchor=\"middle\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        W / 2.0,
        escape(title),
        H - PAD,
        W - PAD,
        H - PAD
    )
}

/// Bars of mean eac per method. Each bar carries its exact value in
/// `data-value`.
pub fn eac_bar_svg(report: &EacReport, title: &str) -> String {
    let mut s = svg_open(title);
    let max = report.methods.iter().map(|m| m.mean).fold(0.0, f64::max).max(1e-12);
    let n = report.methods.len().max(1) as f64;
    let slot = (W - 2.0 * PAD) / n;
    for (i, m) in report.methods.iter().enumerate() {
        let h = (H - 2.0 * PAD) * m.mean / max;
        let x = PAD + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            s,
            "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"steelblue\" data-label=\"{}\" data-value=\"{}\"/>",
            H - PAD - h,
            slot * 0.7,
            m.method,
            m.mean
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{} {:.2}</text>",
            x + slot * 0.35,
            H - PAD + 14.0,
            m.method,
            m.mean
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One point per completed run, grouped by configuration on the x axis.
pub fn grid_scatter_svg(report: &GridReport, title: &str) -> String {
    let mut s = svg_open(title);
    let done: Vec<_> = report.runs.iter().filter_map(|r| r.score.map(|v| (r, v))).collect();
    let mut labels: Vec<String> = Vec::new();
    for (r, _) in &done {
        let l = r.point.label();
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    let (lo, hi) = done
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (_, v)| (a.min(*v), b.max(*v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let slot = (W - 2.0 * PAD) / labels.len().max(1) as f64;
    for (r, v) in &done {
        let k = labels.iter().position(|l| *l == r.point.label()).unwrap_or(0);
        let x = PAD + slot * (k as f64 + 0.5);
        let y = H - PAD - (H - 2.0 * PAD) * (v - lo) / span;
        let _ = writeln!(
            s,
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"darkorange\" data-label=\"{}\" data-run=\"{}\" data-value=\"{v}\"/>",
            escape(&r.point.label()),
            r.run
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Logged reconstruction and total loss against step.
pub fn curve_svg(curve: &TrainingCurve, title: &str) -> String {
    let mut s = svg_open(title);
    let series: [(&str, fn(&super::train::CurvePoint) -> f64, &str); 2] =
        [("rec", |p| p.losses.rec, "steelblue"), ("total", |p| p.losses.total, "darkorange")];
    let max_step = curve.points.iter().map(|p| p.step).max().unwrap_or(1).max(1) as f64;
    for (name, f, color) in series {
        let vals: Vec<f64> = curve.points.iter().map(f).collect();
        let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let pts: Vec<String> = curve
            .points
            .iter()
            .zip(&vals)
            .map(|(p, v)| {
                format!(
                    "{:.2},{:.2}",
                    PAD + (W - 2.0 * PAD) * p.step as f64 / max_step,
                    H - PAD - (H - 2.0 * PAD) * (v - lo) / span
                )
            })
            .collect();
        let data: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" points=\"{}\" data-label=\"{name}\" data-values=\"{}\"/>",
            pts.join(" "),
            data.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One explanation to draw.
pub struct ExplanationFigure<'a> {
    pub name: String,
    pub query: &'a Image,
    pub explanation: &'a Explanation,
}

/// Writes a PNG strip per explanation, and for each report given its JSON
/// and an SVG plot. Returns the paths written; nothing to draw writes
/// nothing.
pub fn emit_figures(
    dir: impl AsRef<Path>,
    explanations: &[ExplanationFigure<'_>],
    eac: Option<&EacReport>,
    grid: Option<&GridReport>,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    if explanations.is_empty() && eac.is_none() && grid.is_none() {
        return Ok(out);
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in explanations {
        let p = dir.join(format!("{}.png", f.name));
        save_png(&explanation_strip(f.query, &f.explanation.states), &p)?;
        out.push(p);
    }
    if let Some(r) = eac {
        let j = dir.join("eac.json");
        write(&j, &serde_json::to_string_pretty(r)?)?;
        let s = dir.join("eac.svg");
        write(&s, &eac_bar_svg(r, "mean eac per method"))?;
        out.extend([j, s]);
    }
    if let Some(r) = grid {
        let j = dir.join("grid.json");
        write(&j, &serde_json::to_string_pretty(r)?)?;
        let s = dir.join("grid.svg");
        write(&s, &grid_scatter_svg(r, "minimum eac of each run"))?;
        out.extend([j, s]);
    }
    Ok(out)
}

/// Pulls every `attr="..."` value out of an SVG document.
pub fn svg_attr_values(svg: &str, attr: &str) -> Vec<String> {
    let key = format!("{attr}=\"");
    let mut out = Vec::new();
    let mut rest = svg;
    while let Some(i) = rest.find(&key) {
        rest = &rest[i + key.len()..];
        let end = rest.find('"').unwrap_or(rest.len());
        out.push(rest[..end].to_string());
        rest = &rest[end..];
    }
    out
}
