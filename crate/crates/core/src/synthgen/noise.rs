//! Handwriting-like noise: a smooth elastic warp followed by stroke-width
//! jitter. One seed fixes both, so every line of a datapoint (and both images
//! of a change pair) deform together.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, SIDE};
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Control points per side of the coarse displacement grid.
    pub distortion_grid: usize,
    /// Standard deviation of control-point displacements, in pixels.
    pub distortion_strength: f32,
    /// Range of the per-datapoint stroke-width factor. A factor `f` blends
    /// `2·|f − 1|` of a one-pixel dilation (f > 1) or erosion (f < 1).
    pub thickness_jitter: (f32, f32),
    /// Root seed for datasets generated with these parameters.
    pub seed: u64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            distortion_grid: 4,
            distortion_strength: 2.5,
            thickness_jitter: (0.75, 1.25),
            seed: 0,
        }
    }
}

impl NoiseParams {
    pub fn identity() -> Self {
        NoiseParams {
            distortion_strength: 0.0,
            thickness_jitter: (1.0, 1.0),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.thickness_jitter;
        if !(self.distortion_strength >= 0.0) {
            return Err(Error::invalid("distortion_strength must be >= 0"));
        }
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::invalid("thickness_jitter must be a positive range"));
        }
        if self.distortion_grid < 2 {
            return Err(Error::invalid("distortion_grid must be >= 2"));
        }
        Ok(())
    }
}

fn catmull_rom(p: [f32; 4], t: f32) -> f32 {
    let t2 = t * t;
    let t3 = t2 * t;
    0.5 * (2.0 * p[1]
        + (-p[0] + p[2]) * t
        + (2.0 * p[0] - 5.0 * p[1] + 4.0 * p[2] - p[3]) * t2
        + (-p[0] + 3.0 * p[1] - 3.0 * p[2] + p[3]) * t3)
}

fn bicubic(grid: &[f32], g: usize, u: f32, v: f32) -> f32 {
    let at = |i: isize, j: isize| {
        let i = i.clamp(0, g as isize - 1) as usize;
        let j = j.clamp(0, g as isize - 1) as usize;
        grid[i * g + j]
    };
    let (iu, iv) = (u.floor() as isize, v.floor() as isize);
    let (fu, fv) = (u - iu as f32, v - iv as f32);
    let rows: [f32; 4] = std::array::from_fn(|k| {
        let i = iu - 1 + k as isize;
        catmull_rom(std::array::from_fn(|m| at(i, iv - 1 + m as isize)), fv)
    });
    catmull_rom(rows, fu)
}

/// Dense (row, col) displacement field for a seed.
pub fn displacement_field(params: &NoiseParams, seed: u64) -> (Vec<f32>, Vec<f32>) {
    let mut rng = rng_for(seed, &[0xD15]);
    let g = params.distortion_grid;
    let mut sample = || -> Vec<f32> {
        (0..g * g)
            .map(|_| {
                let z: f32 = rng.sample(StandardNormal);
                z * params.distortion_strength
            })
            .collect()
    };
    let (gr, gc) = (sample(), sample());
    let scale = (g - 1) as f32 / (SIDE - 1) as f32;
    let mut dr = vec![0.0; SIDE * SIDE];
    let mut dc = vec![0.0; SIDE * SIDE];
    for r in 0..SIDE {
        for c in 0..SIDE {
            let (u, v) = (r as f32 * scale, c as f32 * scale);
            dr[r * SIDE + c] = bicubic(&gr, g, u, v);
            dc[r * SIDE + c] = bicubic(&gc, g, u, v);
        }
    }
    (dr, dc)
}

fn bilinear(im: &Image, r: f32, c: f32) -> f32 {
    let (r0, c0) = (r.floor(), c.floor());
    let (fr, fc) = (r - r0, c - c0);
    let (r0, c0) = (r0 as isize, c0 as isize);
    let v00 = im.get_or_zero(r0, c0);
    let v01 = im.get_or_zero(r0, c0 + 1);
    let v10 = im.get_or_zero(r0 + 1, c0);
    let v11 = im.get_or_zero(r0 + 1, c0 + 1);
    let top = if fc == 0.0 { v00 } else { v00 * (1.0 - fc) + v01 * fc };
    let bot = if fc == 0.0 { v10 } else { v10 * (1.0 - fc) + v11 * fc };
    if fr == 0.0 {
        top
    } else {
        top * (1.0 - fr) + bot * fr
    }
}

fn morph(im: &Image, dilate: bool) -> Image {
    Image::from_fn(|r, c| {
        let (r, c) = (r as isize, c as isize);
        let mut acc = im.get_or_zero(r, c);
        for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
            let v = im.get_or_zero(r + dr, c + dc);
            acc = if dilate { acc.max(v) } else { acc.min(v) };
        }
        acc
    })
}

/// Warps and re-thickens `image`; deterministic in `seed`.
pub fn apply_noise(image: &Image, params: &NoiseParams, seed: u64) -> Image {
    let (dr, dc) = displacement_field(params, seed);
    let mut out = Image::from_fn(|r, c| {
        let k = r * SIDE + c;
        bilinear(image, r as f32 + dr[k], c as f32 + dc[k])
    });

    let mut rng = rng_for(seed, &[0x7A1C]);
    let (lo, hi) = params.thickness_jitter;
    let factor = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let amount = ((factor - 1.0) * 2.0).clamp(-1.0, 1.0);
    if amount != 0.0 {
        let m = morph(&out, amount > 0.0);
        let a = amount.abs();
        for (o, v) in out.pixels_mut().iter_mut().zip(m.pixels()) {
            *o = (1.0 - a) * *o + a * v;
        }
    }
    for v in out.pixels_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}
