//! Optic disc segmentation with a VGG16-UNET trained on BCE + soft Jaccard.
//!
//! Everything is implemented directly on a small dense [`Tensor`] type with
//! hand-written backward passes; there is no autodiff tape.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use loss::{LossKind, PixelPartition};
pub use model::{Gradients, Model, ModelConfig};
pub use optim::{Nadam, NadamConfig};
pub use tensor::Tensor;
