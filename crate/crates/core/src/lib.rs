//! Image captioning with two complementary relationship encoders: a
//! gated graph convolution over a geometrically filtered semantic
//! graph (explicit branch) and a pretrained self-attention region
//! encoder (implicit branch), fused channel-wise by a gated mixture
//! attention inside a two-layer recurrent decoder. Training covers
//! teacher-forced cross-entropy and self-critical policy-gradient
//! fine-tuning rewarded by CIDEr-D.
//!
//! Everything runs on a small tape-based reverse-mode autodiff engine
//! ([`autodiff`]) and is deterministic given (seed, config, data).

pub mod autodiff;
pub mod error;

pub use error::Error;
