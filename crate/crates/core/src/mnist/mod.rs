//! MNIST ingestion (IDX files, zero-padded to 32x32) and line-based
//! augmentation into change pairs.

mod skeleton;

pub use skeleton::{split_lines, thin, StrokeSplit, BINARIZE_THRESHOLD, MERGE_ANGLE_TOLERANCE};

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{Image, SIDE};
use crate::seed::rng_for;
use crate::synthgen::{choose_shown, ChangePair, PairKind};

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;
const SOURCE_SIDE: usize = 28;
const PAD: usize = (SIDE - SOURCE_SIDE) / 2;

/// Default number of augmented pairs: one per training digit.
pub const DEFAULT_PAIRS: usize = 60_000;

#[derive(Clone, Debug, Default)]
pub struct MnistSplit {
    pub images: Vec<Image>,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, Default)]
pub struct Mnist {
    pub train: MnistSplit,
    pub test: MnistSplit,
}

fn open_idx(dir: &Path, stem: &str) -> Result<(PathBuf, Vec<u8>)> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let path = dir.join(&name);
        if !path.exists() {
            continue;
        }
        let mut raw = Vec::new();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let res = if name.ends_with(".gz") {
            flate2::read::GzDecoder::new(file).read_to_end(&mut raw)
        } else {
            std::io::BufReader::new(file).read_to_end(&mut raw)
        };
        res.map_err(|e| Error::Ingestion {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        return Ok((path, raw));
    }
    Err(Error::Ingestion {
        path: dir.join(stem),
        reason: "file not found (plain or .gz)".into(),
    })
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn parse_images(path: &Path, raw: &[u8]) -> Result<Vec<Image>> {
    let bad = |reason: &str| Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if be_u32(raw, 0) != Some(IMAGE_MAGIC) {
        return Err(bad("bad image magic"));
    }
    let n = be_u32(raw, 4).ok_or_else(|| bad("truncated header"))? as usize;
    let (rows, cols) = (be_u32(raw, 8), be_u32(raw, 12));
    if rows != Some(SOURCE_SIDE as u32) || cols != Some(SOURCE_SIDE as u32) {
        return Err(bad("expected 28x28 images"));
    }
    let body = &raw[16..];
    if body.len() != n * SOURCE_SIDE * SOURCE_SIDE {
        return Err(bad("payload length does not match header"));
    }
    Ok(body
        .chunks_exact(SOURCE_SIDE * SOURCE_SIDE)
        .map(|px| {
            Image::from_fn(|r, c| {
                if (PAD..PAD + SOURCE_SIDE).contains(&r) && (PAD..PAD + SOURCE_SIDE).contains(&c) {
                    px[(r - PAD) * SOURCE_SIDE + (c - PAD)] as f32 / 255.0
                } else {
                    0.0
                }
            })
        })
        .collect())
}

fn parse_labels(path: &Path, raw: &[u8]) -> Result<Vec<u8>> {
    let bad = |reason: &str| Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if be_u32(raw, 0) != Some(LABEL_MAGIC) {
        return Err(bad("bad label magic"));
    }
    let n = be_u32(raw, 4).ok_or_else(|| bad("truncated header"))? as usize;
    let body = &raw[8..];
    if body.len() != n || body.iter().any(|&l| l > 9) {
        return Err(bad("label payload is inconsistent"));
    }
    Ok(body.to_vec())
}

fn load_split(dir: &Path, prefix: &str) -> Result<MnistSplit> {
    let (ipath, iraw) = open_idx(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let (lpath, lraw) = open_idx(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let images = parse_images(&ipath, &iraw)?;
    let labels = parse_labels(&lpath, &lraw)?;
    if images.len() != labels.len() {
        return Err(Error::Ingestion {
            path: lpath,
            reason: format!("{} labels for {} images", labels.len(), images.len()),
        });
    }
    Ok(MnistSplit { images, labels })
}

/// Loads the standard IDX files (optionally gzipped) from `dir`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<Mnist> {
    let dir = dir.as_ref();
    Ok(Mnist {
        train: load_split(dir, "train")?,
        test: load_split(dir, "t10k")?,
    })
}

/// Builds `n_pairs` change pairs by masking stroke segments of randomly drawn
/// digits. Digits with no ink are skipped; a multi-change request on a
/// one-segment digit falls back to a no-change pair.
pub fn make_mnist_pairs(images: &[Image], n_pairs: usize, seed: u64) -> Result<Vec<ChangePair>> {
    if n_pairs > 0 && images.is_empty() {
        return Err(Error::invalid("no images to build pairs from"));
    }
    (0..n_pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, &[0x3A, i as u64]);
            for _ in 0..1000 {
                let idx = rng.gen_range(0..images.len());
                let split = split_lines(&images[idx]);
                if split.is_empty() {
                    continue;
                }
                let items: Vec<usize> = (0..split.len()).collect();
                let (sa, sb) = choose_shown(&items, PairKind::for_index(i), &mut rng)?;
                let label = sa.iter().filter(|s| !sb.contains(s)).count()
                    + sb.iter().filter(|s| !sa.contains(s)).count()
                    == 1;
                return Ok(ChangePair {
                    a: split.mask(&images[idx], &sa),
                    b: split.mask(&images[idx], &sb),
                    label,
                    shown_a: sa,
                    shown_b: sb,
                    noise_seed: idx as u64,
                });
            }
            Err(Error::invalid("could not find a digit with ink"))
        })
        .collect()
}
