//! Robust perceptual similarity at desk scale: toy image encoders, cosine
//! metrics and 2AFC judgments, APGD attacks, adversarial fine-tuning,
//! retrieval-based detection, feature inversion and the experiment runner.

pub mod advtrain;
pub mod attacks;
pub mod bench;
mod binio;
pub mod embedding;
pub mod encoders;
pub mod error;
pub mod image;
pub mod inversion;
pub mod optim;
pub mod par;
pub mod percept;
pub mod retrieval;

pub use embedding::Embedding;
pub use error::{Error, Result};
pub use image::{ImageBatch, LabeledImages};
pub use par::Execution;
