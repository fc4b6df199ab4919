use super::{Concepts, LineSpec};
use crate::error::{Error, Result};
use crate::image::{Image, SIDE};

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (vr, vc) = (b.0 - a.0, b.1 - a.1);
    let (wr, wc) = (p.0 - a.0, p.1 - a.1);
    let len2 = vr * vr + vc * vc;
    let t = if len2 > 0.0 {
        ((wr * vr + wc * vc) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dr, dc) = (p.0 - (a.0 + t * vr), p.1 - (a.1 + t * vc));
    (dr * dr + dc * dc).sqrt()
}

pub(crate) fn render_line(spec: &LineSpec) -> Image {
    let (a, b) = spec.endpoints();
    let half = spec.thickness_base / 2.0;
    Image::from_fn(|r, c| {
        let d = segment_distance((r as f32 + 0.5, c as f32 + 0.5), a, b);
        (half + 0.5 - d).clamp(0.0, 1.0)
    })
}

/// Renders the noiseless composition of `lines`: pixelwise max of the
/// anti-aliased single-line renders.
pub fn render_base(lines: Concepts, specs: &[LineSpec]) -> Result<Image> {
    if let Some(bad) = lines.iter().find(|&i| i >= specs.len()) {
        return Err(Error::invalid(format!("unknown line index {bad}")));
    }
    let mut out = Image::zeros();
    for i in lines.iter() {
        let line = render_line(&specs[i]);
        for (o, v) in out.pixels_mut().iter_mut().zip(line.pixels()) {
            *o = o.max(*v);
        }
    }
    debug_assert!(out.pixels().len() == SIDE * SIDE);
    Ok(out)
}
