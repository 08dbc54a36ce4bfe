//! Software rendering: rasterization, texture transfer, masks and background
//! fill.

pub mod fill;
pub mod mask;
pub mod raster;
pub mod texture;

pub use fill::fill_background;
pub use mask::{
    coverage_mask, cut_side, default_cut_landmarks, observed_visibility_mask, occluded_side,
    rendered_visibility_mask, GuidedFilter, MaskKind, Provenance, Side, VisibilityMask,
};
pub use raster::{
    extend_footprint, pixel_center, rasterize, rasterize_projected, RasterBuffers, BACKGROUND,
};
pub use texture::{
    cross_project, render_textured, sample_texture, transfer, transfer_backward, Rendered,
    TextureMap, TextureRoute, TransferGradient,
};
