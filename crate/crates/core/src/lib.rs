//! Dynamically dilated, modulated 3D convolution (D²Conv3D) and friends.
//!
//! This crate implements five 3D convolution operator families over dense
//! (batch, channel, time, height, width) tensors:
//!
//! * standard and fixed-dilation convolution,
//! * deformable convolution with per-point offsets (DCNv1-style) and
//!   additionally per-point modulation (DCNv2-style),
//! * D²Conv3D, where a learned per-output-point dilation triple scales the
//!   kernel grid and a learned modulation value scales each kernel-point term.
//!
//! All operators have analytic backward passes checked against central finite
//! differences, a naive direct-sum reference implementation, and out-of-bounds
//! sampling instrumentation. [`blocks`] wraps the dynamic operators into a
//! block with predictor convolutions and drop-in initialization; [`harness`]
//! trains a small encoder-decoder on synthetic moving-object clips.

pub mod alloctrack;
pub mod bench;

#[cfg(test)]
#[global_allocator]
static TEST_ALLOCATOR: alloctrack::CountingAllocator = alloctrack::CountingAllocator;
pub mod blocks;
pub mod gradcheck;
pub mod harness;
pub mod npy;
pub mod ops;
pub mod sampler;
pub mod tensor;
pub mod viz;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("resource limit: {0}")]
    Resource(String),
    #[error("malformed npy file: {0}")]
    MalformedNpy(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
