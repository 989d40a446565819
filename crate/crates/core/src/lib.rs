//! Training, attacking and certifying bias-free ReLU MLPs under joint
//! ℓ∞ perturbations of the input and the weights.

pub mod attack;
pub mod bounds;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod loss;
pub mod mnist;
pub mod network;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
