//! Core infrastructure for the radenc pipeline: a small f64 autodiff engine,
//! parameter store with freeze/buffer semantics, training schedules,
//! checkpoint persistence and the seeded RNG every run draws from.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod types;

pub use error::{Error, Result};
pub use image::ImageBatch;
pub use params::{param_hash, ParameterStore};
pub use rng::Rng;
pub use tensor::{Arr, Bindings, Tensor};
pub use types::TokenSequence;
