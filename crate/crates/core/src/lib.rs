//! Geometric neural process fields: probabilistic neural-field
//! generalization with Gaussian geometric bases, hierarchical latent
//! variables, style-modulated field networks, and volume rendering.

pub mod encoder;
pub mod error;
pub mod gauss;
pub mod geometry;
pub mod graph;
pub mod latents;
pub mod model;
pub mod modulation;
pub mod nn;
pub mod objective;
pub mod render;
pub mod rng;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Task family a batch belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Signal1d,
    Image2d,
    Rays3d,
}

impl Modality {
    pub fn dim(self) -> usize {
        match self {
            Modality::Signal1d => 1,
            Modality::Image2d => 2,
            Modality::Rays3d => 3,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Signal1d => write!(f, "signal1d"),
            Modality::Image2d => write!(f, "image2d"),
            Modality::Rays3d => write!(f, "rays3d"),
        }
    }
}
