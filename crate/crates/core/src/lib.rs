//! Deep convolutional Gaussian mixture models.
//!
//! A model is a stack of folding, pooling and GMM layers, optionally topped
//! by a linear classifier. Every GMM layer fits its own input by SGD on a
//! log-likelihood objective. Trained models can sample images top-down,
//! score inputs for outlier detection and complete corrupted images.

pub mod arch;
pub mod error;
pub mod inference;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use arch::{propagate_shapes, ArchitectureConfig, LayerSpec};
pub use error::{Error, Result};
pub use model::{ForwardTrace, Layer, Model};
pub use tensor::{Dims, Tensor4};
pub use training::{train, Annealing, TrainingConfig, TrainingHistory};
