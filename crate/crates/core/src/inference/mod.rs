//! Generative use of trained models and the outlier test.

mod sampling;
mod sharpen;
mod stats;

pub use sampling::{
    conditional_sample, distinct_patterns, generate_variants, inpaint, preserved_pixels, sample,
    SampleOutput, SamplingConfig,
};
pub use sharpen::{sharpen, sharpen_objective};
pub use stats::{
    collect_outlier_stats, inlier_masks_from_trace, is_inlier, InlierVerdicts, LayerStats,
    OutlierStats,
};
