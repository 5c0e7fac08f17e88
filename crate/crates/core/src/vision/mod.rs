//! Multi-view composite geometry and the patch-wise vision encoder.

pub mod composite;
pub mod encoder;

pub use composite::{
    extract_patches, slot_of, slot_view, stitch_views, CompositeImage, Patch, PatchMask, NUM_SLOTS,
};
pub use encoder::{
    pixel_shuffle, pixel_shuffle_reduce, vision_init, vit_encode, TokenOrigin, VisionConfig,
    VisionEncoder, VisualTokens, TOKENS_PER_PATCH, TOKEN_FOOTPRINT,
};
