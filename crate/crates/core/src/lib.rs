//! Foreground segmentation by GAN background synthesis.
//!
//! A small DCGAN is trained on background-only frames. For a test frame the
//! generator's latent code is recovered by gradient descent on the L1
//! reconstruction error, the synthesized background is subtracted, and the
//! residual is thresholded into a binary foreground mask.

pub mod cli;
pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod gan;
pub mod inversion;
pub mod metrics;
pub mod optim;
pub mod segmentation;

pub use error::{Error, Result};
