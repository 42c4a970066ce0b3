//! Feature-gathering universal adversarial perturbations at desk scale.
//!
//! The crate trains small image classifiers into the neural-collapse regime,
//! crafts universal perturbations by driving down the cosine similarity of
//! clean and perturbed last-layer features, and evaluates the result with
//! fooling ratios, dominance ratios, and collapse metrics.

pub mod adam;
pub mod analysis;
pub mod attack;
pub mod binio;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use adam::{adam_step, AdamState};
pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
