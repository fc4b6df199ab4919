//! The realism discriminator D.

use tch::nn::{ModuleT, VarStore};
use tch::{Device, Kind, Tensor};

use crate::dvae::conv_block;
use crate::error::Result;
use crate::nn::{cross_entropy, Adam, Layer, Network, NetworkSpec, Shape};

/// Class index of "real" in D's two-way output.
pub const REAL: i64 = 1;
pub const FAKE: i64 = 0;

/// Three conv blocks, each followed by dropout 0.3, then FC(2) + softmax.
pub fn realism_discriminator() -> NetworkSpec {
    let mut layers = Vec::new();
    for (k, s, c) in [(4, 2, 32), (4, 1, 64), (4, 1, 128)] {
        layers.extend(conv_block(k, s, c));
        layers.push(Layer::Dropout { rate: 0.3 });
    }
    layers.extend([Layer::Dense { width: 2 }, Layer::Softmax]);
    NetworkSpec::new(layers)
}

/// One small conv block; for tests.
pub fn toy_realism_discriminator() -> NetworkSpec {
    let mut layers = conv_block(4, 2, 4).to_vec();
    layers.extend([Layer::Dropout { rate: 0.3 }, Layer::Dense { width: 2 }, Layer::Softmax]);
    NetworkSpec::new(layers)
}

pub struct Discriminator {
    pub vs: VarStore,
    pub net: Network,
    pub spec: NetworkSpec,
}

impl Discriminator {
    pub fn new(device: Device, spec: NetworkSpec) -> Result<Self> {
        let vs = VarStore::new(device);
        let net = Network::build(&(vs.root() / "d"), &spec, Shape::image())?;
        Ok(Discriminator { vs, net, spec })
    }

    pub fn logits(&self, x: &Tensor, train: bool) -> Tensor {
        self.net.logits_t(x, train)
    }

    /// `log D(x)`, the log-probability of "real", per row.
    pub fn log_real(&self, x: &Tensor, train: bool) -> Tensor {
        let l = self.logits(x, train);
        l.log_softmax(-1, l.kind()).select(1, REAL)
    }

    /// `D(x)` in evaluation mode.
    pub fn prob_real(&self, x: &Tensor) -> Tensor {
        tch::no_grad(|| self.net.forward_t(x, false).select(1, REAL))
    }

    pub fn kind(&self) -> Kind {
        self.vs
            .trainable_variables()
            .first()
            .map(|t| t.kind())
            .unwrap_or(Kind::Float)
    }
}

/// Binary cross-entropy with label 1 for real and 0 for synthesized rows,
/// averaged over all rows of both batches.
pub fn d_loss(logits_real: &Tensor, logits_fake: &Tensor) -> Tensor {
    let (nr, nf) = (logits_real.size()[0], logits_fake.size()[0]);
    let dev = logits_real.device();
    let targets = Tensor::cat(
        &[
            Tensor::full([nr], REAL, (Kind::Int64, dev)),
            Tensor::full([nf], FAKE, (Kind::Int64, dev)),
        ],
        0,
    );
    cross_entropy(&Tensor::cat(&[logits_real, logits_fake], 0), &targets)
}

/// One update of D. `fake` is detached, so nothing reaches the generator.
pub fn d_train_step(d: &Discriminator, opt: &mut Adam, real: &Tensor, fake: &Tensor) -> f64 {
    let loss = d_loss(&d.logits(real, true), &d.logits(&fake.detach(), true));
    opt.backward_step(&loss);
    loss.double_value(&[])
}

/// Fraction of rows classified correctly at threshold 0.5, evaluation mode.
pub fn d_accuracy(d: &Discriminator, real: &Tensor, fake: &Tensor) -> f64 {
    let pr = d.prob_real(real);
    let pf = d.prob_real(fake);
    let hits = pr.ge(0.5).sum(Kind::Int64).int64_value(&[]) + pf.lt(0.5).sum(Kind::Int64).int64_value(&[]);
    hits as f64 / (pr.size()[0] + pf.size()[0]) as f64
}
