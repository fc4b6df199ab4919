use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_noise, render_base, Concepts, SynthConfig, SyntheticDatapoint};
use crate::error::{Error, Result};
use crate::image::{read_images, write_images, Image};
use crate::seed::rng_for;

/// Two images plus a change-quality label (true = exactly one concept differs).
///
/// `shown_a`/`shown_b` index whatever the concepts are for the source:
/// line indices for synthetic pairs, stroke segments for MNIST pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangePair {
    pub a: Image,
    pub b: Image,
    pub label: bool,
    pub shown_a: Vec<usize>,
    pub shown_b: Vec<usize>,
    pub noise_seed: u64,
}

impl ChangePair {
    pub fn symmetric_difference(&self) -> usize {
        let a: std::collections::BTreeSet<_> = self.shown_a.iter().collect();
        let b: std::collections::BTreeSet<_> = self.shown_b.iter().collect();
        a.symmetric_difference(&b).count()
    }

    /// Whether the stored label agrees with the shown sets.
    pub fn label_is_sound(&self) -> bool {
        self.label == (self.symmetric_difference() == 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairKind {
    Positive,
    NoChange,
    MultiChange,
}

impl PairKind {
    /// 50% positives; negatives split evenly between the two negative kinds.
    pub fn for_index(i: usize) -> PairKind {
        match i % 4 {
            0 | 1 => PairKind::Positive,
            2 => PairKind::NoChange,
            _ => PairKind::MultiChange,
        }
    }
}

/// Chooses the two shown subsets of `items` for a pair of the given kind. A
/// `MultiChange` request with fewer than two items falls back to `NoChange`.
pub(crate) fn choose_shown(
    items: &[usize],
    kind: PairKind,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let subset = |pool: &[usize], rng: &mut ChaCha8Rng| -> Vec<usize> {
        pool.iter().copied().filter(|_| rng.gen_bool(0.5)).collect()
    };
    let (mut a, mut b) = match kind {
        PairKind::Positive => {
            let &l = items
                .choose(rng)
                .ok_or_else(|| Error::invalid("positive pair needs at least one line"))?;
            let mut common = subset(items, rng);
            common.retain(|&x| x != l);
            let mut with = common.clone();
            with.push(l);
            (with, common)
        }
        PairKind::MultiChange if items.len() >= 2 => {
            let k = rng.gen_range(2..=items.len());
            let differing: Vec<usize> = items.choose_multiple(rng, k).copied().collect();
            let rest: Vec<usize> = items.iter().copied().filter(|x| !differing.contains(x)).collect();
            let common = subset(&rest, rng);
            let (mut a, mut b) = (common.clone(), common);
            for l in differing {
                if rng.gen_bool(0.5) {
                    a.push(l)
                } else {
                    b.push(l)
                }
            }
            (a, b)
        }
        PairKind::NoChange | PairKind::MultiChange => {
            let s = subset(items, rng);
            (s.clone(), s)
        }
    };
    a.sort_unstable();
    b.sort_unstable();
    Ok(if rng.gen_bool(0.5) { (a, b) } else { (b, a) })
}

pub fn make_change_pair_of_kind(
    cfg: &SynthConfig,
    variant: Concepts,
    kind: PairKind,
    seed: u64,
) -> Result<ChangePair> {
    let mut rng = rng_for(seed, &[0xCA1]);
    let (sa, sb) = choose_shown(&variant.indices(), kind, &mut rng)?;
    let (sa, sb) = (Concepts::from_indices(sa)?, Concepts::from_indices(sb)?);
    let noise_seed: u64 = rng.gen();
    let a = apply_noise(&render_base(sa, &cfg.lines)?, &cfg.noise, noise_seed);
    let b = apply_noise(&render_base(sb, &cfg.lines)?, &cfg.noise, noise_seed);
    Ok(ChangePair {
        a,
        b,
        label: sa.symmetric_difference(sb).len() == 1,
        shown_a: sa.indices(),
        shown_b: sb.indices(),
        noise_seed,
    })
}

/// Builds a pair from one class variant; negatives pick the no-change or
/// multi-change construction with equal probability.
pub fn make_change_pair(
    cfg: &SynthConfig,
    variant: Concepts,
    positive: bool,
    seed: u64,
) -> Result<ChangePair> {
    let kind = if positive {
        PairKind::Positive
    } else if rng_for(seed, &[0xB0]).gen_bool(0.5) {
        PairKind::NoChange
    } else {
        PairKind::MultiChange
    };
    make_change_pair_of_kind(cfg, variant, kind, seed)
}

fn random_variant(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let c = rng.gen_range(0..cfg.n_classes());
    let v = rng.gen_range(0..cfg.classes[c].variants.len());
    (c, v)
}

/// Balanced change-pair supervision over uniformly drawn class variants.
pub fn generate_change_pairs(cfg: &SynthConfig, n: usize, seed: u64) -> Result<Vec<ChangePair>> {
    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, &[0xC4, i as u64]);
            let (c, v) = random_variant(cfg, &mut rng);
            let pair_seed: u64 = rng.gen();
            make_change_pair_of_kind(cfg, cfg.variant(c, v)?, PairKind::for_index(i), pair_seed)
        })
        .collect()
}

/// Single-change pairs only, as weak supervision for pair-averaging methods.
pub fn generate_positive_pairs(cfg: &SynthConfig, n: usize, seed: u64) -> Result<Vec<ChangePair>> {
    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, &[0xADA, i as u64]);
            let (c, v) = random_variant(cfg, &mut rng);
            let pair_seed: u64 = rng.gen();
            make_change_pair_of_kind(cfg, cfg.variant(c, v)?, PairKind::Positive, pair_seed)
        })
        .collect()
}

/// Two independently noised datapoints that both contain line `shared_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedConceptPair {
    pub a: SyntheticDatapoint,
    pub b: SyntheticDatapoint,
    pub shared_dim: usize,
}

pub fn generate_shared_concept_pairs(
    cfg: &SynthConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<SharedConceptPair>> {
    let holders: Vec<Vec<(usize, usize)>> = (0..cfg.n_lines())
        .map(|l| {
            cfg.classes
                .iter()
                .flat_map(|c| {
                    c.variants
                        .iter()
                        .enumerate()
                        .filter(move |(_, v)| v.contains(&l))
                        .map(move |(vi, _)| (c.class_id, vi))
                })
                .collect()
        })
        .collect();
    let usable: Vec<usize> = (0..cfg.n_lines()).filter(|&l| !holders[l].is_empty()).collect();
    if usable.is_empty() && n > 0 {
        return Err(Error::invalid("no line occurs in any class"));
    }
    (0..n)
        .map(|i| {
            let mut rng = rng_for(seed, &[0x65, i as u64]);
            let l = *usable.choose(&mut rng).expect("non-empty");
            let &(ca, va) = holders[l].choose(&mut rng).expect("non-empty");
            let &(cb, vb) = holders[l].choose(&mut rng).expect("non-empty");
            Ok(SharedConceptPair {
                a: SyntheticDatapoint::render(cfg, ca, va, rng.gen())?,
                b: SyntheticDatapoint::render(cfg, cb, vb, rng.gen())?,
                shared_dim: l,
            })
        })
        .collect()
}

/// A query/contrast pair for explanation evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EacPairSpec {
    pub a_class: usize,
    pub a_variant: usize,
    pub a_seed: u64,
    pub b_class: usize,
    pub b_variant: usize,
    pub b_seed: u64,
}

impl EacPairSpec {
    pub fn render(&self, cfg: &SynthConfig) -> Result<(SyntheticDatapoint, SyntheticDatapoint)> {
        Ok((
            SyntheticDatapoint::render(cfg, self.a_class, self.a_variant, self.a_seed)?,
            SyntheticDatapoint::render(cfg, self.b_class, self.b_variant, self.b_seed)?,
        ))
    }
}

/// `n` pairs whose two classes differ.
pub fn generate_eac_pairs(cfg: &SynthConfig, n: usize, seed: u64) -> Vec<EacPairSpec> {
    (0..n)
        .map(|i| {
            let mut rng = rng_for(seed, &[0xEAC, i as u64]);
            let (a_class, a_variant) = random_variant(cfg, &mut rng);
            let (b_class, b_variant) = loop {
                let cv = random_variant(cfg, &mut rng);
                if cv.0 != a_class {
                    break cv;
                }
            };
            EacPairSpec {
                a_class,
                a_variant,
                a_seed: rng.gen(),
                b_class,
                b_variant,
                b_seed: rng.gen(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_label: bool,
    pub shown_a: Vec<usize>,
    pub shown_b: Vec<usize>,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub version: u32,
    pub records: Vec<PairRecord>,
}

/// Writes `<prefix>_a.bin`, `<prefix>_b.bin` and `<prefix>_manifest.json`.
pub fn write_pairs(dir: impl AsRef<Path>, prefix: &str, pairs: &[ChangePair]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let a: Vec<Image> = pairs.iter().map(|p| p.a.clone()).collect();
    let b: Vec<Image> = pairs.iter().map(|p| p.b.clone()).collect();
    write_images(dir.join(format!("{prefix}_a.bin")), &a)?;
    write_images(dir.join(format!("{prefix}_b.bin")), &b)?;
    let manifest = PairManifest {
        version: super::dataset::MANIFEST_VERSION,
        records: pairs
            .iter()
            .map(|p| PairRecord {
                pair_label: p.label,
                shown_a: p.shown_a.clone(),
                shown_b: p.shown_b.clone(),
                noise_seed: p.noise_seed,
            })
            .collect(),
    };
    let path = dir.join(format!("{prefix}_manifest.json"));
    fs::write(&path, serde_json::to_vec(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn read_pairs(dir: impl AsRef<Path>, prefix: &str) -> Result<Vec<ChangePair>> {
    let dir = dir.as_ref();
    let a = read_images(dir.join(format!("{prefix}_a.bin")))?;
    let b = read_images(dir.join(format!("{prefix}_b.bin")))?;
    let path = dir.join(format!("{prefix}_manifest.json"));
    let m: PairManifest =
        serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
    if a.len() != b.len() || a.len() != m.records.len() {
        return Err(Error::Ingestion {
            path,
            reason: "pair file lengths differ".into(),
        });
    }
    Ok(a.into_iter()
        .zip(b)
        .zip(m.records)
        .map(|((a, b), r)| ChangePair {
            a,
            b,
            label: r.pair_label,
            shown_a: r.shown_a,
            shown_b: r.shown_b,
            noise_seed: r.noise_seed,
        })
        .collect())
}
