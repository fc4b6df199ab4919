//! Seeded generator for the line-concept dataset: base shapes, the noise
//! process, labelled datasets, change-pair supervision and ground-truth
//! explanation sequences.

mod concepts;
mod dataset;
mod noise;
mod pairs;
mod render;
mod truth;

pub use concepts::Concepts;
pub use dataset::{
    generate_dataset, generate_split, read_split, write_dataset, Dataset, ManifestRecord,
    SplitCounts, SplitManifest, SyntheticDatapoint,
};
pub use noise::{apply_noise, displacement_field, NoiseParams};
pub(crate) use pairs::choose_shown;
pub use pairs::{
    generate_change_pairs, generate_eac_pairs, generate_positive_pairs, generate_shared_concept_pairs,
    make_change_pair, make_change_pair_of_kind, read_pairs, write_pairs, ChangePair, EacPairSpec, PairKind,
    PairManifest, PairRecord, SharedConceptPair,
};
pub use render::render_base;
pub use truth::{ground_truth_explanations, GroundTruth, MAX_TRUTH_CONCEPTS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::SIDE;

/// Geometry of one line concept. Angles are in degrees, counter-clockwise
/// from the +column axis with rows pointing down; lengths and anchors are
/// fractions of the canvas side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineSpec {
    pub index: usize,
    pub orientation: f32,
    pub length: f32,
    /// Line centre as (row, col).
    pub anchor: (f32, f32),
    pub thickness_base: f32,
}

impl LineSpec {
    /// Endpoints in pixel coordinates as ((row, col), (row, col)).
    pub fn endpoints(&self) -> ((f32, f32), (f32, f32)) {
        let side = SIDE as f32;
        let (cr, cc) = (self.anchor.0 * side, self.anchor.1 * side);
        let half = self.length * side / 2.0;
        let theta = self.orientation.to_radians();
        let (dc, dr) = (theta.cos(), -theta.sin());
        (
            (cr - half * dr, cc - half * dc),
            (cr + half * dr, cc + half * dc),
        )
    }

    pub fn fits_canvas(&self) -> bool {
        let ((r0, c0), (r1, c1)) = self.endpoints();
        let pad = self.thickness_base / 2.0 + 0.5;
        let side = SIDE as f32;
        [r0, c0, r1, c1]
            .iter()
            .all(|&v| v - pad >= 0.0 && v + pad <= side)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: usize,
    /// Each variant is a set of line indices.
    pub variants: Vec<Vec<usize>>,
}

/// The editable description of the synthetic domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub lines: Vec<LineSpec>,
    pub classes: Vec<ClassSpec>,
    pub noise: NoiseParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            lines: default_lines(),
            classes: default_classes(),
            noise: NoiseParams::default(),
        }
    }
}

/// Seven-segment style layout plus one diagonal:
/// 0 top, 1 upper-left, 2 upper-right, 3 middle, 4 lower-left,
/// 5 lower-right, 6 bottom, 7 diagonal (upper-right to lower-left).
pub fn default_lines() -> Vec<LineSpec> {
    let t = 2.5;
    let h = |index, row| LineSpec {
        index,
        orientation: 0.0,
        length: 0.38,
        anchor: (row, 0.5),
        thickness_base: t,
    };
    let v = |index, row, col| LineSpec {
        index,
        orientation: 90.0,
        length: 0.28,
        anchor: (row, col),
        thickness_base: t,
    };
    vec![
        h(0, 0.22),
        v(1, 0.36, 0.31),
        v(2, 0.36, 0.69),
        h(3, 0.5),
        v(4, 0.64, 0.31),
        v(5, 0.64, 0.69),
        h(6, 0.78),
        LineSpec {
            index: 7,
            orientation: 56.0,
            length: 0.68,
            anchor: (0.5, 0.5),
            thickness_base: t,
        },
    ]
}

/// Class table. Class 9 has two variants: `{0,2,5}` shares more lines with
/// classes 7 and 8 than `{0,1,4}` does, while every other class shares the
/// same number of lines with both.
pub fn default_classes() -> Vec<ClassSpec> {
    let table: [&[&[usize]]; 10] = [
        &[&[0, 1, 2, 6]],
        &[&[3, 7]],
        &[&[0, 2, 3, 4]],
        &[&[0, 3, 6, 7]],
        &[&[1, 3, 5]],
        &[&[0, 1, 3, 5]],
        &[&[2, 4, 6]],
        &[&[0, 2, 7]],
        &[&[2, 3, 5, 6]],
        &[&[0, 2, 5], &[0, 1, 4]],
    ];
    table
        .iter()
        .enumerate()
        .map(|(class_id, vs)| ClassSpec {
            class_id,
            variants: vs.iter().map(|v| v.to_vec()).collect(),
        })
        .collect()
}

impl SynthConfig {
    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn variant(&self, class_id: usize, variant_id: usize) -> Result<Concepts> {
        let class = self
            .classes
            .get(class_id)
            .ok_or_else(|| Error::invalid(format!("unknown class {class_id}")))?;
        let v = class.variants.get(variant_id).ok_or_else(|| {
            Error::invalid(format!("class {class_id} has no variant {variant_id}"))
        })?;
        Concepts::from_indices(v.iter().copied())
    }

    pub fn validate(&self) -> Result<()> {
        if self.lines.is_empty() || self.lines.len() > Concepts::CAPACITY {
            return Err(Error::invalid("line count out of range"));
        }
        for (i, l) in self.lines.iter().enumerate() {
            if l.index != i {
                return Err(Error::invalid(format!("line {i} carries index {}", l.index)));
            }
            if !l.fits_canvas() {
                return Err(Error::invalid(format!("line {i} leaves the canvas")));
            }
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.class_id != i {
                return Err(Error::invalid(format!("class {i} carries id {}", c.class_id)));
            }
            if c.variants.is_empty() {
                return Err(Error::invalid(format!("class {i} has no variants")));
            }
            for v in &c.variants {
                if v.is_empty() || v.iter().any(|&l| l >= self.lines.len()) {
                    return Err(Error::invalid(format!("class {i} has a bad variant {v:?}")));
                }
            }
        }
        self.noise.validate()
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SynthConfig = toml::from_str(s).map_err(|e| Error::Serde(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let cfg: SynthConfig = serde_json::from_str(&s)?;
            cfg.validate()?;
            Ok(cfg)
        } else {
            Self::from_toml_str(&s)
        }
    }
}
