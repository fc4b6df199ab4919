use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{apply_noise, render_base, Concepts, SynthConfig};
use crate::error::{Error, Result};
use crate::image::{read_images, write_images, Image};
use crate::seed::rng_for;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDatapoint {
    pub image: Image,
    pub class_id: usize,
    pub concepts: Concepts,
    pub variant_id: usize,
    pub noise_seed: u64,
}

impl SyntheticDatapoint {
    /// Renders a datapoint; the image is a pure function of the arguments.
    pub fn render(
        cfg: &SynthConfig,
        class_id: usize,
        variant_id: usize,
        noise_seed: u64,
    ) -> Result<Self> {
        let concepts = cfg.variant(class_id, variant_id)?;
        let base = render_base(concepts, &cfg.lines)?;
        Ok(SyntheticDatapoint {
            image: apply_noise(&base, &cfg.noise, noise_seed),
            class_id,
            concepts,
            variant_id,
            noise_seed,
        })
    }

    pub fn concept_vector(&self, n_lines: usize) -> Vec<bool> {
        self.concepts.to_bools(n_lines)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl SplitCounts {
    /// 10,000 train and 1,000 test images per class.
    pub const FULL: SplitCounts = SplitCounts {
        train_per_class: 10_000,
        test_per_class: 1_000,
    };
    pub const DESK: SplitCounts = SplitCounts {
        train_per_class: 1_000,
        test_per_class: 200,
    };

    pub fn scaled(self, scale: f64) -> SplitCounts {
        let s = |n: usize| ((n as f64) * scale).round().max(0.0) as usize;
        SplitCounts {
            train_per_class: s(self.train_per_class),
            test_per_class: s(self.test_per_class),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub class_id: usize,
    pub variant_id: usize,
    pub concepts: Vec<bool>,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub version: u32,
    pub split: String,
    pub seed: u64,
    pub records: Vec<ManifestRecord>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<SyntheticDatapoint>,
    pub test: Vec<SyntheticDatapoint>,
}

/// Generates one split, class-major. Each datapoint draws its variant and
/// noise seed from a stream keyed by (seed, split, class, index), so the
/// output does not depend on the number of worker threads.
pub fn generate_split(
    cfg: &SynthConfig,
    split_tag: u64,
    per_class: usize,
    seed: u64,
) -> Result<Vec<SyntheticDatapoint>> {
    let jobs: Vec<(usize, usize)> = (0..cfg.n_classes())
        .flat_map(|c| (0..per_class).map(move |i| (c, i)))
        .collect();
    jobs.par_iter()
        .map(|&(class_id, i)| {
            let mut rng = rng_for(seed, &[split_tag, class_id as u64, i as u64]);
            let variant_id = rng.gen_range(0..cfg.classes[class_id].variants.len());
            let noise_seed: u64 = rng.gen();
            SyntheticDatapoint::render(cfg, class_id, variant_id, noise_seed)
        })
        .collect()
}

pub fn generate_dataset(cfg: &SynthConfig, counts: SplitCounts, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    Ok(Dataset {
        train: generate_split(cfg, 0, counts.train_per_class, seed)?,
        test: generate_split(cfg, 1, counts.test_per_class, seed)?,
    })
}

fn manifest_for(points: &[SyntheticDatapoint], n_lines: usize, split: &str, seed: u64) -> SplitManifest {
    SplitManifest {
        version: MANIFEST_VERSION,
        split: split.to_string(),
        seed,
        records: points
            .iter()
            .map(|p| ManifestRecord {
                class_id: p.class_id,
                variant_id: p.variant_id,
                concepts: p.concept_vector(n_lines),
                noise_seed: p.noise_seed,
            })
            .collect(),
    }
}

/// Writes `<split>_images.bin` and `<split>_manifest.json` for both splits,
/// plus the generating `config.json`.
pub fn write_dataset(dir: impl AsRef<Path>, cfg: &SynthConfig, ds: &Dataset, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, points) in [("train", &ds.train), ("test", &ds.test)] {
        let images: Vec<Image> = points.iter().map(|p| p.image.clone()).collect();
        write_images(dir.join(format!("{name}_images.bin")), &images)?;
        let manifest = manifest_for(points, cfg.n_lines(), name, seed);
        let path = dir.join(format!("{name}_manifest.json"));
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_vec_pretty(cfg)?).map_err(|e| Error::io(&path, e))
}

pub fn read_split(dir: impl AsRef<Path>, split: &str) -> Result<Vec<SyntheticDatapoint>> {
    let dir = dir.as_ref();
    let images = read_images(dir.join(format!("{split}_images.bin")))?;
    let path = dir.join(format!("{split}_manifest.json"));
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: SplitManifest = serde_json::from_slice(&text)?;
    if manifest.records.len() != images.len() {
        return Err(Error::Ingestion {
            path,
            reason: "manifest and image counts differ".into(),
        });
    }
    Ok(images
        .into_iter()
        .zip(manifest.records)
        .map(|(image, r)| SyntheticDatapoint {
            image,
            class_id: r.class_id,
            concepts: Concepts::from_bools(&r.concepts),
            variant_id: r.variant_id,
            noise_seed: r.noise_seed,
        })
        .collect())
}
