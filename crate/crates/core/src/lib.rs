//! Lifelong few-shot learning with soft prompts over a frozen toy
//! encoder-decoder.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for typical use.

pub mod backbone;
pub mod error;
pub mod format;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod prompt;
pub mod runner;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Backbone64 = backbone::Backbone<f64>;
pub type Backbone32 = backbone::Backbone<f32>;
