//! Hybrid sequence model: autoregressive text spans interleaved with
//! masked-diffusion audio spans, trained and decoded inside one transformer.

pub mod attention;
pub mod corpus;
pub mod corruption;
pub mod decoder;
pub mod error;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
