use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::LVAEParams;
use crate::conditioning::{CDTrainParams, CondParams};
use crate::dvae::{Architecture, DVAEParams};
use crate::error::{Error, Result};
use crate::explain::GraphParams;
use crate::metrics::EACConfig;
use crate::nn::AdamConfig;
use crate::seed::resolve_seed;

/// Optimizer updates per model at full scale.
pub const FULL_STEPS: u64 = 2_000_000;
pub const CD_FULL_STEPS: u64 = 5_000_000;
/// Supervision pairs generated for each supervised method.
pub const SUPERVISION_PAIRS: usize = 100_000;
/// Scale factor of the desk presets.
pub const DESK_SCALE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelType {
    #[serde(rename = "dvae")]
    Dvae,
    #[serde(rename = "lvae")]
    Lvae,
    #[serde(rename = "gvae")]
    Gvae,
    #[serde(rename = "ada-gvae")]
    AdaGvae,
    #[serde(rename = "vae-ce")]
    VaeCe,
}

impl ModelType {
    pub const ALL: [ModelType; 5] = [
        ModelType::Dvae,
        ModelType::Lvae,
        ModelType::Gvae,
        ModelType::AdaGvae,
        ModelType::VaeCe,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ModelType::Dvae => "dvae",
            ModelType::Lvae => "lvae",
            ModelType::Gvae => "gvae",
            ModelType::AdaGvae => "ada-gvae",
            ModelType::VaeCe => "vae-ce",
        }
    }
}

impl fmt::Display for ModelType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ModelType {
    type Err = Error;
    fn from_str(s: &str) -> Result<ModelType> {
        ModelType::ALL
            .into_iter()
            .find(|m| m.tag() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown model type {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    #[default]
    Standard,
    /// Tiny networks for smoke tests.
    Toy,
}

impl ArchKind {
    pub fn dvae(self, n_classes: usize) -> Architecture {
        match self {
            ArchKind::Standard => Architecture::standard(n_classes),
            ArchKind::Toy => Architecture::toy(n_classes),
        }
    }

    pub fn change_discriminator(self, n_classes: usize) -> Architecture {
        match self {
            ArchKind::Standard => Architecture::change_discriminator(n_classes),
            ArchKind::Toy => Architecture::toy(n_classes),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Mnist,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub kind: DatasetKind,
    /// Generated synthetic dataset directory, or the MNIST IDX directory.
    pub dataset: PathBuf,
    /// Line/class table; the built-in table when absent.
    pub synth_config: Option<PathBuf>,
    /// Frozen change discriminator, required for VAE-CE.
    pub cd_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelType,
    pub data: DataConfig,
    pub dvae: DVAEParams,
    pub lvae: LVAEParams,
    pub cond: CondParams,
    pub optimizer: AdamConfig,
    /// Step budget at scale 1.
    pub steps: u64,
    pub scale: f64,
    pub batch: usize,
    /// Pairs per step for GVAE and ADA-GVAE.
    pub pair_batch: usize,
    /// Supervision pairs at scale 1.
    pub supervision_pairs: usize,
    pub seed: u64,
    pub arch: ArchKind,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub graph: GraphParams,
    pub eac: EACConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::selected(ModelType::Dvae)
    }
}

impl ExperimentConfig {
    /// The selected hyperparameters of `model`; anything not tuned is 1.
    pub fn selected(model: ModelType) -> ExperimentConfig {
        let (beta_y, alpha) = match model {
            ModelType::Dvae => (2.0, 10.0),
            ModelType::Lvae => (1.0, 7.0),
            ModelType::Gvae => (1.0, 6.0),
            ModelType::AdaGvae => (1.0, 4.0),
            ModelType::VaeCe => (2.0, 7.0),
        };
        ExperimentConfig {
            model,
            data: DataConfig::default(),
            dvae: DVAEParams {
                beta_y,
                beta_x: 1.0,
                alpha,
                n_y: 8,
                n_x: 8,
            },
            lvae: LVAEParams { alpha_d: 20.0, n_c: 8 },
            cond: CondParams {
                alpha_r: 1.0,
                alpha_p: 3.0,
                n_y: 8,
            },
            optimizer: AdamConfig::default(),
            steps: FULL_STEPS,
            scale: 1.0,
            batch: 128,
            pair_batch: 64,
            supervision_pairs: SUPERVISION_PAIRS,
            seed: 0,
            arch: ArchKind::Standard,
            log_every: 1000,
            checkpoint_every: 100_000,
            graph: GraphParams::default(),
            eac: EACConfig::default(),
        }
    }

    /// 1% of the full budget: 20,000 steps.
    pub fn desk(model: ModelType) -> ExperimentConfig {
        ExperimentConfig {
            scale: DESK_SCALE,
            log_every: 100,
            checkpoint_every: 5000,
            ..ExperimentConfig::selected(model)
        }
    }

    pub fn effective_steps(&self) -> u64 {
        ((self.steps as f64 * self.scale).round() as u64).max(1)
    }

    pub fn effective_supervision(&self) -> usize {
        ((self.supervision_pairs as f64 * self.scale).round() as usize).max(self.pair_batch)
    }

    /// Seed after the `VCE_SEED` override.
    pub fn resolved_seed(&self) -> u64 {
        resolve_seed(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.dvae.validate()?;
        self.graph.validate()?;
        self.eac.validate()?;
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("scale must be positive, got {}", self.scale)));
        }
        if self.batch < 2 || self.pair_batch == 0 {
            return Err(Error::invalid("batch must be at least 2 and pair_batch positive"));
        }
        if self.model == ModelType::Lvae && self.lvae.n_c != self.dvae.n_y {
            return Err(Error::invalid(format!(
                "LVAE has {} concepts but z_y has {} dimensions",
                self.lvae.n_c, self.dvae.n_y
            )));
        }
        if self.model == ModelType::VaeCe && self.cond.n_y != self.dvae.n_y {
            return Err(Error::invalid("conditioning n_y must equal the z_y width"));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::invalid("logging and checkpoint intervals must be positive"));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<ExperimentConfig> {
        let c: ExperimentConfig = toml::from_str(s).map_err(|e| Error::invalid(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml_str(&s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CdConfig {
    pub params: CDTrainParams,
    pub n_latent: usize,
    pub optimizer: AdamConfig,
    pub steps: u64,
    pub scale: f64,
    pub batch: usize,
    pub pair_batch: usize,
    /// Change pairs at scale 1.
    pub pairs: usize,
    pub seed: u64,
    pub arch: ArchKind,
    pub data: DataConfig,
    pub log_every: u64,
}

impl Default for CdConfig {
    fn default() -> Self {
        CdConfig {
            params: CDTrainParams::default(),
            n_latent: crate::conditioning::CD_LATENT,
            optimizer: AdamConfig::default(),
            steps: CD_FULL_STEPS,
            scale: 1.0,
            batch: 128,
            pair_batch: 64,
            pairs: SUPERVISION_PAIRS,
            seed: 0,
            arch: ArchKind::Standard,
            data: DataConfig::default(),
            log_every: 1000,
        }
    }
}

impl CdConfig {
    pub fn effective_steps(&self) -> u64 {
        ((self.steps as f64 * self.scale).round() as u64).max(1)
    }

    pub fn effective_pairs(&self) -> usize {
        ((self.pairs as f64 * self.scale).round() as usize).max(self.pair_batch)
    }

    pub fn from_toml_str(s: &str) -> Result<CdConfig> {
        toml::from_str(s).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CdConfig> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        CdConfig::from_toml_str(&s)
    }
}

/// Explored values of one model type; every axis not listed is `[1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGrid {
    pub model: ModelType,
    pub beta_y: Vec<f64>,
    pub alpha: Vec<f64>,
    #[serde(default = "one")]
    pub alpha_d: Vec<f64>,
    #[serde(default = "one")]
    pub alpha_p: Vec<f64>,
}

fn one() -> Vec<f64> {
    vec![1.0]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub model: ModelType,
    pub beta_y: f64,
    pub alpha: f64,
    pub alpha_d: f64,
    pub alpha_p: f64,
}

impl GridPoint {
    /// `base` with this point's values; every untuned weight is 1.
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        c.model = self.model;
        c.dvae.beta_y = self.beta_y;
        c.dvae.beta_x = 1.0;
        c.dvae.alpha = self.alpha;
        c.lvae.alpha_d = self.alpha_d;
        c.cond.alpha_p = self.alpha_p;
        c.cond.alpha_r = 1.0;
        c
    }

    pub fn label(&self) -> String {
        let mut s = format!("{} by={} a={}", self.model, self.beta_y, self.alpha);
        match self.model {
            ModelType::Lvae => s += &format!(" ad={}", self.alpha_d),
            ModelType::VaeCe => s += &format!(" ap={}", self.alpha_p),
            _ => {}
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub models: Vec<ModelGrid>,
    pub runs: usize,
}

impl GridSpec {
    /// The explored values of the hyperparameter search.
    pub fn full() -> GridSpec {
        let g = |model, beta_y: &[f64], alpha: &[f64], alpha_d: &[f64], alpha_p: &[f64]| ModelGrid {
            model,
            beta_y: beta_y.to_vec(),
            alpha: alpha.to_vec(),
            alpha_d: alpha_d.to_vec(),
            alpha_p: alpha_p.to_vec(),
        };
        GridSpec {
            models: vec![
                g(ModelType::Dvae, &[2.0, 4.0], &[5.0, 10.0, 15.0], &[1.0], &[1.0]),
                g(ModelType::Lvae, &[1.0, 2.0], &[5.0, 7.0], &[20.0, 25.0, 30.0], &[1.0]),
                g(ModelType::Gvae, &[1.0, 2.0, 4.0], &[2.0, 4.0, 6.0], &[1.0], &[1.0]),
                g(ModelType::AdaGvae, &[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0], &[1.0], &[1.0]),
                g(ModelType::VaeCe, &[2.0, 4.0], &[5.0, 7.0], &[1.0], &[3.0, 5.0]),
            ],
            runs: 4,
        }
    }

    /// Cartesian product per model type, in a fixed order.
    pub fn configurations(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for m in &self.models {
            for &beta_y in &m.beta_y {
                for &alpha in &m.alpha {
                    for &alpha_d in &m.alpha_d {
                        for &alpha_p in &m.alpha_p {
                            out.push(GridPoint {
                                model: m.model,
                                beta_y,
                                alpha,
                                alpha_d,
                                alpha_p,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn total_runs(&self) -> usize {
        self.configurations().len() * self.runs
    }

    pub fn count_for(&self, model: ModelType) -> usize {
        self.configurations().iter().filter(|p| p.model == model).count()
    }
}
