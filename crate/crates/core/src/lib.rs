//! Linear relocation between the latent spaces of independently trained
//! generative models, at desk scale.
//!
//! The pipeline: train several latent-variable models on a synthetic blob
//! manifold, rank latent variables by reconstruction gain, pick a small
//! support set from extreme latent sectors, fit linear maps between latent
//! spaces, and score them in latent and visible domains.

pub mod error;
pub mod importance;
pub mod inversion;
pub mod manifold;
pub mod mapping;
pub mod models;
pub mod numerics;
pub mod storage;
pub mod support;

pub use error::{Error, Result};
