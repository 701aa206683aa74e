//! Two-stage generative model of segmented figures.
//!
//! A variational sketch stage samples semantic label maps of articulated
//! figures, optionally conditioned on a six-part body silhouette; a portray
//! stage translates sketches into RGB images, optionally steered by
//! per-segment colors. The crate also contains the procedural data forge
//! and the evaluation protocols used around the models.

pub mod error;
pub mod eval;
pub mod forge;
pub mod latent;
pub mod nn;
pub mod portray;
pub mod sketch;
pub mod train;

pub use error::{Error, Result};
