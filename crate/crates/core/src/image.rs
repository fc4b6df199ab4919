//! The 32x32 single-channel image type and its on-disk tensor format.
//!
//! Tensor files are `b"VCET"`, a little-endian `u32` rank, `rank` little-endian
//! `u64` dimensions, then the row-major little-endian `f32` payload. Image
//! splits use shape `[N, 32, 32, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use tch::{Kind, Tensor};

use crate::error::{Error, Result};

pub const SIDE: usize = 32;
pub const PIXELS: usize = SIDE * SIDE;

const MAGIC: &[u8; 4] = b"VCET";

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Vec<f32>,
}

impl Image {
    pub fn zeros() -> Self {
        Image {
            data: vec![0.0; PIXELS],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        if data.len() != PIXELS {
            return Err(Error::invalid(format!(
                "image needs {PIXELS} pixels, got {}",
                data.len()
            )));
        }
        Ok(Image { data })
    }

    pub fn from_fn(mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(PIXELS);
        for r in 0..SIDE {
            for c in 0..SIDE {
                data.push(f(r, c));
            }
        }
        Image { data }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * SIDE + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * SIDE + col] = v;
    }

    /// Value at integer coordinates, zero outside the canvas.
    #[inline]
    pub fn get_or_zero(&self, row: isize, col: isize) -> f32 {
        if row < 0 || col < 0 || row >= SIDE as isize || col >= SIDE as isize {
            0.0
        } else {
            self.data[row as usize * SIDE + col as usize]
        }
    }

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn max_with(&self, other: &Image) -> Image {
        Image {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a.max(*b))
                .collect(),
        }
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Intensity-weighted centroid as (row, col), in pixel-centre coordinates.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut m, mut mr, mut mc) = (0.0f64, 0.0f64, 0.0f64);
        for r in 0..SIDE {
            for c in 0..SIDE {
                let v = self.get(r, c) as f64;
                m += v;
                mr += v * (r as f64 + 0.5);
                mc += v * (c as f64 + 0.5);
            }
        }
        (m > 0.0).then(|| (mr / m, mc / m))
    }

    pub fn to_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = image::GrayImage::from_fn(SIDE as u32, SIDE as u32, |x, y| {
            image::Luma([to_u8(self.get(y as usize, x as usize))])
        });
        buf.save(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }
}

pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Packs images into an `[N, 1, 32, 32]` tensor of the given kind.
pub fn images_to_tensor(images: &[Image], kind: Kind) -> Tensor {
    let mut flat = Vec::with_capacity(images.len() * PIXELS);
    for im in images {
        flat.extend_from_slice(&im.data);
    }
    Tensor::from_slice(&flat)
        .reshape([images.len() as i64, 1, SIDE as i64, SIDE as i64])
        .to_kind(kind)
}

/// Unpacks an `[N, 1, 32, 32]` (or `[N, 1024]`) tensor.
pub fn tensor_to_images(t: &Tensor) -> Vec<Image> {
    let n = t.size()[0] as usize;
    let flat: Vec<f32> = Vec::<f32>::try_from(
        t.detach()
            .to_kind(Kind::Float)
            .contiguous()
            .reshape([-1]),
    )
    .expect("float tensor");
    flat.chunks(PIXELS)
        .take(n)
        .map(|c| Image { data: c.to_vec() })
        .collect()
}

pub fn write_tensor_file(path: impl AsRef<Path>, shape: &[usize], data: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::invalid(format!(
            "shape {shape:?} needs {expected} values, got {}",
            data.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(MAGIC)?;
    write(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        write(&(d as u64).to_le_bytes())?;
    }
    for v in data {
        write(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f32>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |reason: &str| Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(|_| bad("truncated header"))?;
    let rank = u32::from_le_bytes(u32b) as usize;
    if rank > 8 {
        return Err(bad("implausible rank"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut u64b = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut u64b).map_err(|_| bad("truncated header"))?;
        shape.push(u64::from_le_bytes(u64b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = Vec::with_capacity(n * 4);
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != n * 4 {
        return Err(bad("payload length does not match shape"));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((shape, data))
}

pub fn write_images(path: impl AsRef<Path>, images: &[Image]) -> Result<()> {
    let mut flat = Vec::with_capacity(images.len() * PIXELS);
    for im in images {
        flat.extend_from_slice(&im.data);
    }
    write_tensor_file(path, &[images.len(), SIDE, SIDE, 1], &flat)
}

pub fn read_images(path: impl AsRef<Path>) -> Result<Vec<Image>> {
    let path = path.as_ref();
    let (shape, data) = read_tensor_file(path)?;
    if shape.len() != 4 || shape[1] != SIDE || shape[2] != SIDE || shape[3] != 1 {
        return Err(Error::Ingestion {
            path: path.to_path_buf(),
            reason: format!("expected [N, 32, 32, 1], found {shape:?}"),
        });
    }
    Ok(data
        .chunks_exact(PIXELS)
        .map(|c| Image { data: c.to_vec() })
        .collect())
}
