//! Comparison regularizers layered on the DVAE loss: per-dimension label
//! classifiers (LVAE) and pair-averaging of class latents (GVAE, ADA-GVAE).

mod average;
mod lvae;

pub use average::{
    ada_gvae_pair_step, ada_masks, average_posteriors, gvae_average, gvae_masks, pair_elbo,
    pair_train_step, symmetric_kl, symmetric_kl_tensor, Averaging, PairBreakdown,
};
pub use lvae::{lvae_loss, lvae_train_step, LVAEParams, LvaeBreakdown, LvaeHeads, LvaeLoss};
