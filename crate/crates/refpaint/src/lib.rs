//! Reference-based painterly inpainting with a pixel-space diffusion model.
//!
//! The crate trains a small UNet denoiser from scratch: the background of a
//! picture is kept, a free-form hole is cut, and the model fills the hole so
//! that it agrees semantically with a reference picture while keeping the
//! style of the background. Everything runs on CPU with plain `f64` buffers;
//! no GPU, no external ML framework.
//!
//! Module map:
//! - [`tensor`]: dense row-major tensors plus the numeric kernels (conv,
//!   matmul, normalization, resampling).
//! - [`autodiff`]: a minimal reverse-mode tape over those kernels.
//! - [`schedule`]: the variance-preserving noise schedule and the forward /
//!   reverse diffusion steps.
//! - [`mask`]: free-form stroke masks, the keep/inpaint convention, and the
//!   background/object quadruplet.
//! - [`embedder`]: patch embedder producing context tokens and global
//!   embeddings; [`pca`] splits embeddings into semantic and style parts.
//! - [`denoiser`]: the UNet with its ladder-side conditioning branch, masked
//!   feature fusion and cross-attention.
//! - [`trainer`]: self-supervised training loop (AdamW, context dropout,
//!   gradient accumulation).
//! - [`sampler`]: disentangled classifier-free guidance and the blended
//!   inpainting loop.
//! - [`evaluator`]: copy-paste baseline and embedding-space metrics.
//! - [`dataset`]: directory loading and the procedural painting/object corpus.
//! - [`checkpoint`]: the binary container for weights, config and PCA basis.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod embedder;
pub mod evaluator;
pub mod imageio;
pub mod mask;
pub mod params;
pub mod pca;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trainer;
pub mod util;
