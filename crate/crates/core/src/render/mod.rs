//! Ray sampling and differentiable volume rendering.

mod hierarchy;
mod image;
mod sampling;
mod volume;

pub use hierarchy::{
    alpha_at_depths, render_hierarchical, render_hierarchical_density, DepthPlan,
    HierarchicalOutput, PassOutput, SamplingConfig,
};
pub use image::{
    camera_rays, render_image, to_u8, write_depth_raw, write_png_gray16, write_png_rgb8,
    DepthSidecar, InferenceField, RenderedImage,
};
pub use sampling::{
    importance_sample, interval_lengths, merge_order, stratified_sample, ImportanceSamples,
    RaySamples, PDF_PADDING,
};
pub use volume::{composite, opacity, render_ray, Composite, RenderOutput, DEPTH_WEIGHT_FLOOR};
