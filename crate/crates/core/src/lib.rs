//! Koopman-lifted neural operator with a structured per-mode generator
//! `L_k = S - D_k`, together with data generators, training, and spectral
//! diagnostics.

pub mod datagen;
pub mod error;
pub mod generator;
pub mod gradtape;
pub mod model;
pub mod numkern;
pub mod physics;
pub mod train;

pub use error::{Error, Result};
