//! Class-disentangled VAE: a class encoder `z_y`, a residual encoder `z_x`,
//! a shared decoder, a label classifier on `z_y` and an adversarial label
//! classifier on `z_x` reached through gradient reversal.

mod latent;

pub use latent::{kl_to_standard_normal, normal_tensor, reparameterize, LatentGaussian, Posterior};

use rand::Rng;
use serde::{Deserialize, Serialize};
use tch::nn::{self, ModuleT};
use tch::{Device, Kind, Tensor};

use crate::error::{Error, Result};
use crate::image::{images_to_tensor, tensor_to_images, Image};
use crate::nn::{cross_entropy, grad_reverse_scaled, Adam, Head, Layer, Network, NetworkSpec, Shape, LRELU_SLOPE};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DVAEParams {
    pub beta_y: f64,
    pub beta_x: f64,
    pub alpha: f64,
    pub n_y: usize,
    pub n_x: usize,
}

impl Default for DVAEParams {
    fn default() -> Self {
        DVAEParams {
            beta_y: 2.0,
            beta_x: 1.0,
            alpha: 10.0,
            n_y: 8,
            n_x: 8,
        }
    }
}

impl DVAEParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_y == 0 || self.n_x == 0 {
            return Err(Error::invalid("latent widths must be at least 1"));
        }
        if [self.beta_y, self.beta_x, self.alpha].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

fn lrelu() -> Layer {
    Layer::LeakyRelu { slope: LRELU_SLOPE }
}

/// Conv + LReLU + BN.
pub fn conv_block(kernel: i64, stride: i64, channels: i64) -> [Layer; 3] {
    [Layer::Conv { kernel, stride, channels }, lrelu(), Layer::BatchNorm]
}

fn tconv(kernel: i64, stride: i64, channels: i64) -> [Layer; 3] {
    [Layer::TConv { kernel, stride, channels }, lrelu(), Layer::BatchNorm]
}

/// Dense(hidden) + LReLU + BN, then Dense(out) + softmax.
pub fn mlp_classifier(hidden: i64, out: i64) -> NetworkSpec {
    NetworkSpec::new(vec![
        Layer::Dense { width: hidden },
        lrelu(),
        Layer::BatchNorm,
        Layer::Dense { width: out },
        Layer::Softmax,
    ])
}

pub fn linear_classifier(out: i64) -> NetworkSpec {
    NetworkSpec::new(vec![Layer::Dense { width: out }, Layer::Softmax])
}

/// Layer lists for every network of a DVAE. Encoder trunks end before the
/// mean and log-variance heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder_trunk: NetworkSpec,
    pub decoder: NetworkSpec,
    pub classifier_y: NetworkSpec,
    pub classifier_x: NetworkSpec,
    pub n_classes: usize,
}

impl Architecture {
    /// The main model's networks. The 32768-wide dense output is reshaped to
    /// 128x16x16 before its batch norm.
    pub fn standard(n_classes: usize) -> Self {
        let nc = n_classes as i64;
        let mut trunk = Vec::new();
        trunk.extend(conv_block(4, 2, 32));
        trunk.extend(conv_block(4, 1, 64));
        trunk.extend(conv_block(4, 1, 128));
        let mut dec = vec![
            Layer::Dense { width: 32768 },
            lrelu(),
            Layer::Reshape { channels: 128, height: 16, width: 16 },
            Layer::BatchNorm,
        ];
        dec.extend(tconv(4, 1, 64));
        dec.extend(tconv(4, 1, 32));
        dec.extend([Layer::TConv { kernel: 4, stride: 2, channels: 1 }, Layer::Sigmoid]);
        Architecture {
            encoder_trunk: NetworkSpec::new(trunk),
            decoder: NetworkSpec::new(dec),
            classifier_y: linear_classifier(nc),
            classifier_x: mlp_classifier(50, nc),
            n_classes,
        }
    }

    /// The change discriminator's smaller DVAE.
    pub fn change_discriminator(n_classes: usize) -> Self {
        let nc = n_classes as i64;
        let mut trunk = Vec::new();
        trunk.extend(conv_block(4, 2, 32));
        trunk.extend(conv_block(4, 1, 128));
        let mut dec = vec![
            Layer::Dense { width: 32768 },
            lrelu(),
            Layer::Reshape { channels: 128, height: 16, width: 16 },
            Layer::BatchNorm,
        ];
        dec.extend(tconv(4, 1, 32));
        dec.extend([Layer::TConv { kernel: 4, stride: 2, channels: 1 }, Layer::Sigmoid]);
        Architecture {
            encoder_trunk: NetworkSpec::new(trunk),
            decoder: NetworkSpec::new(dec),
            classifier_y: mlp_classifier(50, nc),
            classifier_x: mlp_classifier(50, nc),
            n_classes,
        }
    }

    /// A tiny network set for gradient checks and fast tests.
    pub fn toy(n_classes: usize) -> Self {
        let nc = n_classes as i64;
        let mut trunk = Vec::new();
        trunk.extend(conv_block(4, 2, 3));
        let dec = vec![
            Layer::Dense { width: 2 * 16 * 16 },
            lrelu(),
            Layer::Reshape { channels: 2, height: 16, width: 16 },
            Layer::BatchNorm,
            Layer::TConv { kernel: 4, stride: 2, channels: 1 },
            Layer::Sigmoid,
        ];
        Architecture {
            encoder_trunk: NetworkSpec::new(trunk),
            decoder: NetworkSpec::new(dec),
            classifier_y: linear_classifier(nc),
            classifier_x: mlp_classifier(6, nc),
            n_classes,
        }
    }
}

#[derive(Debug)]
pub struct Encoder {
    trunk: Network,
    mean: Head,
    logvar: Head,
}

impl Encoder {
    pub fn build(p: &nn::Path, trunk: &NetworkSpec, width: usize) -> Result<Encoder> {
        let trunk = Network::build(&(p / "trunk"), trunk, Shape::image())?;
        let out = trunk.output;
        Ok(Encoder {
            mean: Head::new(&(p / "mean"), out, width as i64),
            logvar: Head::new(&(p / "logvar"), out, width as i64),
            trunk,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Posterior {
        let h = self.trunk.forward_t(x, train);
        Posterior {
            mean: self.mean.forward(&h),
            logvar: self.logvar.forward(&h),
        }
    }
}

#[derive(Debug)]
pub struct Dvae {
    pub arch: Architecture,
    pub params: DVAEParams,
    pub enc_y: Encoder,
    pub enc_x: Encoder,
    pub dec: Network,
    pub cls_y: Network,
    pub cls_x: Network,
    device: Device,
}

/// Per-step standard-normal noise for both latent samples.
pub struct Noise {
    pub eps_y: Tensor,
    pub eps_x: Tensor,
}

impl Noise {
    pub fn draw(rng: &mut impl Rng, batch: usize, params: &DVAEParams, kind: Kind) -> Noise {
        Noise {
            eps_y: normal_tensor(rng, batch, params.n_y, kind),
            eps_x: normal_tensor(rng, batch, params.n_x, kind),
        }
    }
}

/// Scalar values of the loss terms. `total` is the objective seen by the
/// encoders and decoder: `beta_y*kl_y + beta_x*kl_x + rec + alpha*cls_y -
/// alpha*cls_x_adv`, where `cls_x_adv` is the adversarial classifier's own
/// cross-entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl_y: f64,
    pub kl_x: f64,
    pub rec: f64,
    pub cls_y: f64,
    pub cls_x_adv: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.kl_y, self.kl_x, self.rec, self.cls_y, self.cls_x_adv, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total={:.5} rec={:.5} kl_y={:.5} kl_x={:.5} cls_y={:.5} cls_x_adv={:.5}",
            self.total, self.rec, self.kl_y, self.kl_x, self.cls_y, self.cls_x_adv
        )
    }
}

pub struct DvaeForward {
    pub q_y: Posterior,
    pub q_x: Posterior,
    pub z_y: Tensor,
    pub z_x: Tensor,
    pub recon: Tensor,
    pub kl_y: Tensor,
    pub kl_x: Tensor,
    pub rec: Tensor,
    pub cls_y: Tensor,
    pub cls_x_adv: Tensor,
    /// Value of the combined objective (see [`LossBreakdown`]).
    pub total: Tensor,
    /// What gets back-propagated: `total` with the adversarial term routed
    /// through gradient reversal, plus the adversarial classifier's own
    /// cross-entropy for its parameters.
    pub surrogate: Tensor,
}

impl DvaeForward {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            kl_y: self.kl_y.double_value(&[]),
            kl_x: self.kl_x.double_value(&[]),
            rec: self.rec.double_value(&[]),
            cls_y: self.cls_y.double_value(&[]),
            cls_x_adv: self.cls_x_adv.double_value(&[]),
            total: self.total.double_value(&[]),
        }
    }
}

/// Squared error summed over pixels, averaged over the batch.
pub fn reconstruction_error(x: &Tensor, recon: &Tensor) -> Tensor {
    let b = x.size()[0];
    (recon - x)
        .square()
        .reshape([b, -1])
        .sum_dim_intlist(1, false, recon.kind())
        .mean(recon.kind())
}

impl Dvae {
    pub fn build(p: &nn::Path, arch: Architecture, params: DVAEParams) -> Result<Dvae> {
        params.validate()?;
        let n_z = (params.n_y + params.n_x) as i64;
        let enc_y = Encoder::build(&(p / "enc_y"), &arch.encoder_trunk, params.n_y)?;
        let enc_x = Encoder::build(&(p / "enc_x"), &arch.encoder_trunk, params.n_x)?;
        let dec = Network::build(&(p / "dec"), &arch.decoder, Shape::Flat(n_z))?;
        if dec.output != Shape::image() {
            return Err(Error::Construction {
                layer: arch.decoder.layers.len().saturating_sub(1),
                name: "decoder".into(),
                reason: format!("outputs {:?}, expected a 1x32x32 image", dec.output),
            });
        }
        let cls_y = Network::build(&(p / "cls_y"), &arch.classifier_y, Shape::Flat(params.n_y as i64))?;
        let cls_x = Network::build(&(p / "cls_x"), &arch.classifier_x, Shape::Flat(params.n_x as i64))?;
        for (net, name) in [(&cls_y, "classifier_y"), (&cls_x, "classifier_x")] {
            if net.output != Shape::Flat(arch.n_classes as i64) {
                return Err(Error::Construction {
                    layer: 0,
                    name: name.into(),
                    reason: format!("outputs {:?}, expected {} classes", net.output, arch.n_classes),
                });
            }
        }
        Ok(Dvae {
            arch,
            params,
            enc_y,
            enc_x,
            dec,
            cls_y,
            cls_x,
            device: p.device(),
        })
    }

    pub fn device(&self) -> Device {
        self.device
    }

    pub fn encode(&self, x: &Tensor, train: bool) -> (Posterior, Posterior) {
        (self.enc_y.forward_t(x, train), self.enc_x.forward_t(x, train))
    }

    pub fn decode(&self, z_y: &Tensor, z_x: &Tensor, train: bool) -> Tensor {
        self.dec.forward_t(&Tensor::cat(&[z_y, z_x], 1), train)
    }

    /// The full loss on a labelled batch (`x` in `[B,1,32,32]`, `y` int64).
    pub fn forward_loss(&self, x: &Tensor, y: &Tensor, noise: &Noise, train: bool) -> DvaeForward {
        let p = self.params;
        let (q_y, q_x) = self.encode(x, train);
        let z_y = q_y.sample(&noise.eps_y);
        let z_x = q_x.sample(&noise.eps_x);
        let recon = self.decode(&z_y, &z_x, train);
        let kl_y = q_y.kl();
        let kl_x = q_x.kl();
        let rec = reconstruction_error(x, &recon);
        let cls_y = cross_entropy(&self.cls_y.logits_t(&z_y, train), y);
        // One pass serves both the encoder's fooling objective and the
        // adversary's own objective: the reversal scales the encoder's
        // gradient by -alpha while the adversary sees +1.
        let cls_x_adv = cross_entropy(
            &self.cls_x.logits_t(&grad_reverse_scaled(&z_x, p.alpha), train),
            y,
        );
        let elbo = &kl_y * p.beta_y + &kl_x * p.beta_x + &rec;
        let total = &elbo + &cls_y * p.alpha - &cls_x_adv * p.alpha;
        let surrogate = &elbo + &cls_y * p.alpha + &cls_x_adv;
        DvaeForward {
            q_y,
            q_x,
            z_y,
            z_x,
            recon,
            kl_y,
            kl_x,
            rec,
            cls_y,
            cls_x_adv,
            total,
            surrogate,
        }
    }

    /// ELBO terms only (weighted KLs plus reconstruction) on posteriors that
    /// may have been modified, e.g. by pair averaging.
    pub fn elbo_from_posteriors(
        &self,
        x: &Tensor,
        q_y: &Posterior,
        q_x: &Posterior,
        noise: &Noise,
        train: bool,
    ) -> Tensor {
        let z_y = q_y.sample(&noise.eps_y);
        let z_x = q_x.sample(&noise.eps_x);
        let recon = self.decode(&z_y, &z_x, train);
        q_y.kl() * self.params.beta_y + q_x.kl() * self.params.beta_x + reconstruction_error(x, &recon)
    }

    pub fn class_probs(&self, mu_y: &Tensor) -> Tensor {
        self.cls_y.forward_t(mu_y, false)
    }

    /// Posterior means for a list of images in evaluation mode.
    pub fn encode_means(&self, images: &[Image], batch: usize) -> (Tensor, Tensor) {
        tch::no_grad(|| {
            let mut ys = Vec::new();
            let mut xs = Vec::new();
            for chunk in images.chunks(batch.max(1)) {
                let x = images_to_tensor(chunk, self.kind()).to_device(self.device);
                let (q_y, q_x) = self.encode(&x, false);
                ys.push(q_y.mean);
                xs.push(q_x.mean);
            }
            if ys.is_empty() {
                let k = (self.kind(), self.device);
                return (
                    Tensor::zeros([0, self.params.n_y as i64], k),
                    Tensor::zeros([0, self.params.n_x as i64], k),
                );
            }
            (Tensor::cat(&ys, 0), Tensor::cat(&xs, 0))
        })
    }

    pub fn decode_images(&self, z_y: &Tensor, z_x: &Tensor) -> Vec<Image> {
        tch::no_grad(|| tensor_to_images(&self.decode(z_y, z_x, false)))
    }

    /// Floating-point kind of the parameters.
    pub fn kind(&self) -> Kind {
        self.enc_y.mean.kind()
    }
}

/// One optimizer update on a labelled batch.
pub fn train_step(
    model: &Dvae,
    opt: &mut Adam,
    x: &Tensor,
    y: &Tensor,
    noise: &Noise,
) -> Result<LossBreakdown> {
    let out = model.forward_loss(x, y, noise, true);
    let b = out.breakdown();
    if !b.is_finite() {
        return Err(Error::Diverged {
            step: opt.step + 1,
            breakdown: b.to_string(),
        });
    }
    opt.backward_step(&out.surrogate);
    Ok(b)
}

#[cfg(test)]
mod tests;
