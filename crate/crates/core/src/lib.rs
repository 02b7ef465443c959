//! Face forgery video detection by latent spatiotemporal adaptation.
//!
//! A CNN encodes every frame of a clip into a grid of local features, a
//! transformer turns the whole clip into one spatiotemporal vector, and two
//! small heads (an adaptive layer and a classifier) sit on top. The backbone
//! is initialised on real videos only with contrastive and latent
//! reconstruction objectives, then frozen; adaptation trains the heads on
//! labelled source clips while reconstructing the features of unlabelled
//! target clips through the adaptive layer.

pub mod adapt;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod nn;
pub mod perturb;
pub mod pretrain;
pub mod train;

pub use error::{Error, Result};
