use serde::{Deserialize, Serialize};
use tch::nn::{self, ModuleT};
use tch::Tensor;

use crate::error::{Error, Result};

pub const LRELU_SLOPE: f64 = 0.1;

/// One entry of a declarative architecture. Convolutions use "same" padding:
/// output side is `ceil(input / stride)` for convolutions and
/// `input * stride` for transposed convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv { kernel: i64, stride: i64, channels: i64 },
    TConv { kernel: i64, stride: i64, channels: i64 },
    BatchNorm,
    LeakyRelu { slope: f64 },
    Dense { width: i64 },
    Reshape { channels: i64, height: i64, width: i64 },
    Dropout { rate: f64 },
    Sigmoid,
    Softmax,
}

impl Layer {
    fn name(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::TConv { .. } => "tconv",
            Layer::BatchNorm => "batch_norm",
            Layer::LeakyRelu { .. } => "leaky_relu",
            Layer::Dense { .. } => "dense",
            Layer::Reshape { .. } => "reshape",
            Layer::Dropout { .. } => "dropout",
            Layer::Sigmoid => "sigmoid",
            Layer::Softmax => "softmax",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Flat(i64),
    /// Channels, height, width.
    Map(i64, i64, i64),
}

impl Shape {
    pub fn numel(&self) -> i64 {
        match *self {
            Shape::Flat(n) => n,
            Shape::Map(c, h, w) => c * h * w,
        }
    }

    pub fn image() -> Shape {
        Shape::Map(1, crate::image::SIDE as i64, crate::image::SIDE as i64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<Layer>,
}

fn same_pad(input: i64, kernel: i64, stride: i64) -> (i64, i64, i64) {
    let out = (input + stride - 1) / stride;
    let total = ((out - 1) * stride + kernel - input).max(0);
    (out, total / 2, total - total / 2)
}

impl NetworkSpec {
    pub fn new(layers: Vec<Layer>) -> Self {
        NetworkSpec { layers }
    }

    /// Output shape for `input`, or a construction error naming the first
    /// inconsistent layer.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let mut shape = input;
        for (i, l) in self.layers.iter().enumerate() {
            shape = step_shape(i, l, shape)?;
        }
        Ok(shape)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn step_shape(i: usize, l: &Layer, shape: Shape) -> Result<Shape> {
    let err = |reason: String| Error::Construction {
        layer: i,
        name: l.name().into(),
        reason,
    };
    let positive = |v: i64, what: &str| {
        if v > 0 {
            Ok(())
        } else {
            Err(err(format!("{what} must be positive, got {v}")))
        }
    };
    match *l {
        Layer::Conv { kernel, stride, channels } | Layer::TConv { kernel, stride, channels } => {
            positive(kernel, "kernel")?;
            positive(stride, "stride")?;
            positive(channels, "channels")?;
            let Shape::Map(_, h, w) = shape else {
                return Err(err(format!("needs a feature map, got {shape:?}")));
            };
            if matches!(l, Layer::Conv { .. }) {
                Ok(Shape::Map(channels, same_pad(h, kernel, stride).0, same_pad(w, kernel, stride).0))
            } else {
                if kernel < stride {
                    return Err(err("kernel smaller than stride".into()));
                }
                Ok(Shape::Map(channels, h * stride, w * stride))
            }
        }
        Layer::Dense { width } => {
            positive(width, "width")?;
            Ok(Shape::Flat(width))
        }
        Layer::Reshape { channels, height, width } => {
            if channels * height * width != shape.numel() {
                return Err(err(format!(
                    "cannot reshape {} values to {channels}x{height}x{width}",
                    shape.numel()
                )));
            }
            Ok(Shape::Map(channels, height, width))
        }
        Layer::Dropout { rate } => {
            if !(0.0..1.0).contains(&rate) {
                return Err(err(format!("rate {rate} outside [0, 1)")));
            }
            Ok(shape)
        }
        Layer::Softmax if !matches!(shape, Shape::Flat(_)) => {
            Err(err("softmax needs a flat input".into()))
        }
        _ => Ok(shape),
    }
}

#[derive(Debug)]
enum Built {
    Conv(nn::Conv2D, [i64; 4]),
    TConv(nn::ConvTranspose2D, (i64, i64), (i64, i64)),
    BatchNorm(nn::BatchNorm),
    LeakyRelu(f64),
    Dense(nn::Linear),
    Reshape([i64; 3]),
    Dropout(f64),
    Sigmoid,
    Softmax,
}

/// A network instantiated from a [`NetworkSpec`] under a var-store path.
#[derive(Debug)]
pub struct Network {
    layers: Vec<Built>,
    pub input: Shape,
    pub output: Shape,
}

impl Network {
    pub fn build(p: &nn::Path, spec: &NetworkSpec, input: Shape) -> Result<Network> {
        let output = spec.output_shape(input)?;
        let mut shape = input;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, l) in spec.layers.iter().enumerate() {
            let next = step_shape(i, l, shape)?;
            let sub = p / format!("{i}");
            let built = match (*l, shape) {
                (Layer::Conv { kernel, stride, channels }, Shape::Map(c, h, w)) => {
                    let (_, t, b) = same_pad(h, kernel, stride);
                    let (_, lft, r) = same_pad(w, kernel, stride);
                    let cfg = nn::ConvConfig { stride, ..Default::default() };
                    Built::Conv(nn::conv2d(&sub, c, channels, kernel, cfg), [lft, r, t, b])
                }
                (Layer::TConv { kernel, stride, channels }, Shape::Map(c, _, _)) => {
                    let crop = kernel - stride;
                    let cfg = nn::ConvTransposeConfig { stride, ..Default::default() };
                    Built::TConv(
                        nn::conv_transpose2d(&sub, c, channels, kernel, cfg),
                        (crop / 2, crop - crop / 2),
                        (crop / 2, crop - crop / 2),
                    )
                }
                (Layer::BatchNorm, Shape::Map(c, _, _)) => {
                    Built::BatchNorm(nn::batch_norm2d(&sub, c, Default::default()))
                }
                (Layer::BatchNorm, Shape::Flat(n)) => {
                    Built::BatchNorm(nn::batch_norm1d(&sub, n, Default::default()))
                }
                (Layer::LeakyRelu { slope }, _) => Built::LeakyRelu(slope),
                (Layer::Dense { width }, s) => {
                    Built::Dense(nn::linear(&sub, s.numel(), width, Default::default()))
                }
                (Layer::Reshape { channels, height, width }, _) => {
                    Built::Reshape([channels, height, width])
                }
                (Layer::Dropout { rate }, _) => Built::Dropout(rate),
                (Layer::Sigmoid, _) => Built::Sigmoid,
                (Layer::Softmax, _) => Built::Softmax,
                _ => unreachable!("shape inference accepted {l:?} on {shape:?}"),
            };
            layers.push(built);
            shape = next;
        }
        Ok(Network { layers, input, output })
    }

    fn run(&self, xs: &Tensor, train: bool, skip_final_softmax: bool) -> Tensor {
        let n = self.layers.len();
        let mut x = xs.shallow_clone();
        for (i, l) in self.layers.iter().enumerate() {
            x = match l {
                Built::Conv(c, pad) => x.constant_pad_nd(pad.as_slice()).apply(c),
                Built::TConv(c, (t, b), (lf, r)) => {
                    let y = x.apply(c);
                    let (h, w) = (y.size()[2], y.size()[3]);
                    y.narrow(2, *t, h - t - b).narrow(3, *lf, w - lf - r)
                }
                Built::BatchNorm(bn) => x.apply_t(bn, train),
                Built::LeakyRelu(s) => leaky_relu(&x, *s),
                Built::Dense(d) => {
                    let b = x.size()[0];
                    x.reshape([b, -1]).apply(d)
                }
                Built::Reshape([c, h, w]) => {
                    let b = x.size()[0];
                    x.reshape([b, *c, *h, *w])
                }
                Built::Dropout(p) => x.dropout(*p, train),
                Built::Sigmoid => x.sigmoid(),
                Built::Softmax if skip_final_softmax && i + 1 == n => x,
                Built::Softmax => x.softmax(-1, x.kind()),
            };
        }
        x
    }

    /// Output with a trailing softmax left off, for use with log-softmax
    /// losses.
    pub fn logits_t(&self, xs: &Tensor, train: bool) -> Tensor {
        self.run(xs, train, true)
    }
}

impl ModuleT for Network {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        self.run(xs, train, false)
    }
}

/// `max(x, slope * x)`, valid for `slope` in `[0, 1]`.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.maximum(&(x * slope))
}

/// Mean categorical cross-entropy from logits, in the logits' own precision.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor) -> Tensor {
    logits.log_softmax(-1, logits.kind()).nll_loss(targets)
}

/// Identity forward; multiplies the incoming gradient by `-lambda`.
pub fn grad_reverse_scaled(x: &Tensor, lambda: f64) -> Tensor {
    // x.detach() - x is exactly zero, so the forward value is x bit for bit.
    x.detach() + (x.detach() - x) * lambda
}

/// Identity forward; negates the gradient.
pub fn grad_reverse(x: &Tensor) -> Tensor {
    grad_reverse_scaled(x, 1.0)
}

/// A dense head applied to an existing feature tensor, used for the
/// mean/log-variance outputs of encoders.
#[derive(Debug)]
pub struct Head(nn::Linear);

impl Head {
    pub fn new(p: &nn::Path, input: Shape, width: i64) -> Head {
        Head(nn::linear(p, input.numel(), width, Default::default()))
    }

    pub fn forward(&self, feats: &Tensor) -> Tensor {
        let b = feats.size()[0];
        feats.reshape([b, -1]).apply(&self.0)
    }

    pub fn kind(&self) -> tch::Kind {
        self.0.ws.kind()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::{Device, Kind};

    fn conv(k: i64, s: i64, c: i64) -> Layer {
        Layer::Conv { kernel: k, stride: s, channels: c }
    }

    #[test]
    fn same_padding_shapes() {
        let spec = NetworkSpec::new(vec![conv(4, 2, 32), conv(4, 1, 64), conv(4, 1, 128)]);
        assert_eq!(spec.output_shape(Shape::image()).unwrap(), Shape::Map(128, 16, 16));
        let vs = nn::VarStore::new(Device::Cpu);
        let net = Network::build(&vs.root(), &spec, Shape::image()).unwrap();
        let y = net.forward_t(&Tensor::zeros([2, 1, 32, 32], (Kind::Float, Device::Cpu)), false);
        assert_eq!(y.size(), vec![2, 128, 16, 16]);
    }

    #[test]
    fn transposed_shapes() {
        let spec = NetworkSpec::new(vec![
            Layer::Dense { width: 32768 },
            Layer::Reshape { channels: 128, height: 16, width: 16 },
            Layer::TConv { kernel: 4, stride: 1, channels: 64 },
            Layer::TConv { kernel: 4, stride: 2, channels: 1 },
            Layer::Sigmoid,
        ]);
        let vs = nn::VarStore::new(Device::Cpu);
        let net = Network::build(&vs.root(), &spec, Shape::Flat(16)).unwrap();
        let y = net.forward_t(&Tensor::randn([3, 16], (Kind::Float, Device::Cpu)), false);
        assert_eq!(y.size(), vec![3, 1, 32, 32]);
    }

    #[test]
    fn bad_reshape_names_layer() {
        let spec = NetworkSpec::new(vec![
            Layer::Dense { width: 100 },
            Layer::Reshape { channels: 128, height: 16, width: 16 },
        ]);
        match spec.output_shape(Shape::Flat(16)) {
            Err(Error::Construction { layer, name, .. }) => {
                assert_eq!(layer, 1);
                assert_eq!(name, "reshape");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn conv_on_flat_rejected() {
        let spec = NetworkSpec::new(vec![conv(4, 2, 8)]);
        let err = spec.output_shape(Shape::Flat(10)).unwrap_err();
        assert!(err.to_string().contains("conv"), "{err}");
    }

    #[test]
    fn spec_round_trips() {
        let spec = NetworkSpec::new(vec![
            conv(4, 2, 32),
            Layer::LeakyRelu { slope: LRELU_SLOPE },
            Layer::BatchNorm,
            Layer::Dropout { rate: 0.3 },
            Layer::Dense { width: 2 },
            Layer::Softmax,
        ]);
        assert_eq!(NetworkSpec::from_json(&spec.to_json().unwrap()).unwrap(), spec);
    }

    #[test]
    fn grad_reverse_negates() {
        let v = Tensor::from(3.0f64).set_requires_grad(true);
        let u = grad_reverse(&v);
        assert_eq!(u.double_value(&[]), 3.0);
        let f = &u * &u;
        f.backward();
        assert_eq!(v.grad().double_value(&[]), -6.0);
    }

    #[test]
    fn scaled_reversal_is_exact_identity_forward() {
        let v = Tensor::from_slice(&[0.1f64, -7.3, 1e-8, 123.456]).set_requires_grad(true);
        let u = grad_reverse_scaled(&v, 3.0);
        assert!(u.equal(&v.detach()));
        u.sum(Kind::Double).backward();
        assert!(v.grad().equal(&Tensor::from_slice(&[-3.0f64; 4])));
    }

    #[test]
    fn conv_bias_gradient_on_sparse_input() {
        // Blank regions give many identical pre-activations; the gradient
        // through the activation must still match finite differences.
        tch::manual_seed(0);
        let mut vs = nn::VarStore::new(Device::Cpu);
        let spec = NetworkSpec::new(vec![conv(4, 2, 3), Layer::LeakyRelu { slope: 0.1 }]);
        let net = Network::build(&vs.root(), &spec, Shape::image()).unwrap();
        vs.double();
        let opts = (Kind::Double, Device::Cpu);
        let x = Tensor::rand([4, 1, 32, 32], opts).gt(0.9).to_kind(Kind::Double);
        let w = Tensor::rand([4, 3, 16, 16], opts);
        let f = || (net.forward_t(&x, true) * &w).sum(Kind::Double);
        f().backward();
        let params: Vec<Tensor> = vs.trainable_variables();
        let mut rng = crate::seed::rng_for(0, &[]);
        let gc = crate::nn::check_gradients(&params, || tch::no_grad(|| f().double_value(&[])), 3, 1e-6, &mut rng);
        assert!(gc.rel_error() < 1e-6, "{}", gc.rel_error());
    }

    #[test]
    fn leaky_relu_slope() {
        let x = Tensor::from_slice(&[-2.0f64, 0.0, 3.0]);
        let y: Vec<f64> = Vec::try_from(leaky_relu(&x, 0.1)).unwrap();
        assert_eq!(y, vec![-0.2, 0.0, 3.0]);
    }
}
