//! Few-shot speaking-style adaptation for audio-driven face animation.
//!
//! The crate trains a sequence-to-vertex regression model whose
//! initialization is meta-learned across speakers, so a handful of clips
//! from an unseen speaker adapts it to their style. Adaptation touches only
//! low-rank adapter factors; a latent relation encoder regularizes the
//! few-shot fit against collapse.
//!
//! Layering, bottom up:
//! - [`autodiff`]: dense tensors and a reverse-mode tape with higher-order
//!   gradients.
//! - `model`: the regression network with low-rank adapters.
//! - `relation`: the latent set encoder and its divergence regularizer.
//! - `objectives`: training losses and evaluation metrics.
//! - `corpus`: synthetic multi-speaker data with known style structure.
//! - `meta`: episodic meta-training and few-shot personalization.
//! - `trainer`: end-to-end training, adaptation, and evaluation drivers.

pub mod autodiff;
pub mod codec;
pub mod corpus;
pub mod error;
pub mod meta;
pub mod model;
pub mod objectives;
pub mod params;
pub mod relation;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
