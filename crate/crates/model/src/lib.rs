//! Model zoo for the radenc pipeline: the ViT encoder, global-crops-only
//! self-distillation pretraining, classification adaptation (full /
//! head-only / LoRA), the frozen-encoder dense segmentation adapter and the
//! captioning bridge with its toy sequence decoder.

pub mod caption;
pub mod cls;
pub mod dense;
pub mod encoder;
pub mod fwd;
pub mod ssl;

pub use encoder::{Encoder, EncoderConfig, Tokens};
pub use fwd::Fwd;
