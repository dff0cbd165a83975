//! Generalizable knowledge distillation for cross-domain binary segmentation.
//!
//! The crate is `no_std` (with `alloc`): every computation is a pure function of
//! its inputs and seeds. File formats, configuration and the command line live
//! in the companion `gkd` crate.
//!
//! Layout:
//! - [`synthdata`]: seeded two-domain image generator, crops, augmentation tactics.
//! - [`autograd`]: a small reverse-mode tape over dense `f64` tensors.
//! - [`nets`]: teacher/student segmentation networks, the mask autoencoder and
//!   the alignment headers that map bottleneck features into a shared latent space.
//! - [`graphs`]: intra- and inter-coupling contrastive graphs over latents.
//! - [`losses`]: every loss term and the weighted total objective.
//! - [`metrics`]: confusion metrics, ROC AUC, GAP and the Fréchet semantic distance.
//! - [`trainer`]: the four training phases with freezing and checkpoints.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autograd;
mod error;
pub mod graphs;
pub mod linalg;
pub mod losses;
pub(crate) mod math;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
