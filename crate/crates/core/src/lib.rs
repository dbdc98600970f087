//! Panoptic-aware convolution and upsampling kernels.
//!
//! The crate provides a small NCHW tensor type, panoptic and semantic label
//! maps, a partial convolution whose windows are masked by panoptic identity,
//! a 2x upsampling layer that realigns features with a higher resolution
//! panoptic map and fills newly appearing regions from the semantic map, and
//! a toy generator assembled from those layers. Reference and optimized
//! kernels, analytic backward passes, finite-difference checks, PNG/text
//! I/O and a benchmark harness round it out.

pub mod bench;
pub mod conv;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod init;
pub mod io;
pub mod maps;
pub mod tensor;
pub mod upsample;

pub use conv::{
    panoptic_conv_backward, panoptic_conv_forward, panoptic_conv_forward_optimized,
    standard_conv_backward, standard_conv_forward, window_mask, ConvGrads, ConvParams,
};
pub use error::{Error, Result};
pub use generator::{
    generator_forward, resblock_forward, shared_encoder_features, spade_denorm, Generator,
    GeneratorConfig, ResBlockParams, ScalarKind, SpadeParams,
};
pub use maps::{nearest_downsample, panoptic_id, BinaryMask, PanopticMap, SemanticMap, PAD_ID};
pub use tensor::{nearest_upsample, one_hot, Scalar, Tensor};
pub use upsample::{
    align_upsample, align_upsample_backward, hole_fill, misalignment_stats, panoptic_upsample,
    panoptic_upsample_backward, AlignResult, HoleFillParams, Routing, StageStats,
};
