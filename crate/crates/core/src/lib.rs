//! One-class novelty detection with a decoder-encoder network.
//!
//! A generator is fitted to per-sample latent codes initialised from a PCA
//! projection of the training class, an encoder is tied to those codes and
//! sharpened by global, local and prior mutual-information critics trained
//! against augmented hard negatives, and test images are scored by how badly
//! `decode(encode(x))` reconstructs them.

pub mod augment;
pub mod config;
pub mod dataset;
pub mod error;
pub mod latent_init;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod real;
pub mod scoring;
pub mod trainer;

pub use error::{Error, Result};
