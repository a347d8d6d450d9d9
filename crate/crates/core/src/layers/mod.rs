//! The four layer types. Each has an estimation-mode forward transform and a
//! sampling-mode transform for control signals.

pub mod classifier;
pub mod folding;
pub mod gmm;
pub mod pooling;

pub use classifier::{ClassifierGrads, ClassifierParams};
pub use folding::FoldingParams;
pub use gmm::{
    gmm_forward, gmm_grad, gmm_loss, gmm_pass, gmm_pass_sharded, gmm_sample_control,
    top_s_distribution, GmmGrads, GmmParams, GmmPass, LossMode, SampledControl, Smoothing,
};
pub use pooling::PoolingParams;
