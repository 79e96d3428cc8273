//! Anti-memorization copyright risk toolkit: prompt structuring and risk
//! scoring, iterative prompt sanitization, attention-derived soft masks,
//! partial-region infringement detection, and a toy mitigation objective
//! over a v-prediction latent diffusion simulator.
// `!(x > 0.0)` style checks are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod backends;
pub mod calibration;
pub mod cli;
pub mod config;
pub mod detector;
pub mod diffusion;
pub mod error;
pub mod mitigator;
pub mod numerics;
pub mod prompt;
pub mod risk;
pub mod sanitizer;

pub use error::{Error, ProviderError, Result};
