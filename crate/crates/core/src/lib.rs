//! Token-guided image compression for visual-language model consumers.
//!
//! The pipeline has two learned stages. A U-Net style pre-editor, conditioned
//! on semantic tokens of the source image and a compression-ratio index `q`,
//! rewrites the image before coding. A variable-rate hyperprior codec then
//! compresses the edited image into a small self-describing bitstream.
//! Training combines bitrate, pixel distortion, token distortion and a
//! differentiable soft-rank term on the token matrix.
//!
//! Module map:
//!
//! - [`tokens`]: token grids, extractors, soft rank and the token losses.
//! - [`preedit`]: the pre-editing network and the shared `q` adaption layer.
//! - [`codec`]: GDN transforms, entropy models, the range coder and bitstreams.
//! - [`losses`]: the weighted training objective and per-`q` presets.
//! - [`trainer`]: datasets, checkpoints and the three training stages.
//! - [`evalkit`]: bpp, Pareto fronts, BD-rate, RA curves and complexity reports.
//! - [`pipeline`]: extractor + pre-editor + codec glued into one object.
//!
//! Everything runs on the CPU through `candle`; convolutions use the
//! im2col kernels in [`nn`].

pub mod codec;
pub mod error;
pub mod evalkit;
pub mod image;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod preedit;
pub mod tokens;
pub mod trainer;

pub use error::{Error, Result};
