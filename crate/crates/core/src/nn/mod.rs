//! Declarative network specs built on tch, plus the optimizer, checkpoint
//! and gradient-check plumbing shared by every model.

mod archive;
mod gradcheck;
mod optim;
mod spec;

pub use archive::{load_archive, save_archive, var_tensors, Archive, FORMAT_VERSION};
pub use gradcheck::{check_gradients, GradCheck};
pub use optim::{Adam, AdamConfig};
pub use spec::{
    cross_entropy, grad_reverse, grad_reverse_scaled, leaky_relu, Head, Layer, Network, NetworkSpec, Shape,
    LRELU_SLOPE,
};
