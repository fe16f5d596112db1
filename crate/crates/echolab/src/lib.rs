//! Desk-scale workbench for latent-predictive video pretraining on
//! synthetic echo-like cine clips, with a compute-matched pixel
//! reconstruction baseline, physics-informed ultrasound perturbations, and a
//! standardized multi-view attentive probing framework.

pub mod container;
pub mod error;
pub mod optim;
pub mod params;
pub mod perturb;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod video;

pub use error::{Error, Result};
