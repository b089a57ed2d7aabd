//! Text-to-motion retrieval: motion data handling, a spatio-temporal motion
//! encoder, a text encoder, the contrastive training objectives, evaluation
//! protocols and an on-disk embedding store.

mod bytes;
pub mod data;
pub mod error;
pub mod eval;
pub mod generative;
pub mod gradsuite;
pub mod loss;
pub mod model;
pub mod motion_encoder;
pub mod nn;
pub mod store;
pub mod text;
pub mod train;

pub use candle_core::DType;
pub use error::{Error, Result};
