//! Thumbnail image compression by convolutional sparse coding, with a
//! bottleneck autoencoder baseline and pixel-wise quality metrics.
//!
//! The sparse-coding pipeline keeps half of the pixels of an image (a fixed
//! checkerboard or a seeded random selection), infers a non-negative sparse
//! code over a learned overcomplete convolutional dictionary with a
//! rectifying locally competitive algorithm (LCA), and fills in the missing
//! pixels from the reconstruction. The autoencoder squeezes the same image
//! through a convolutional encoder into a code half the size of the input.
//!
//! Module map:
//!
//! * [`image_io`] image tensors and the CIFAR-10 binary loader
//! * [`masking`] checkerboard and random pixel masks
//! * [`sparse_coder`] dictionaries, convolutional LCA inference
//! * [`trainer`] Hebbian/SGD dictionary learning and the lambda sweep
//! * [`autoencoder`] the conv-encoder / dense-decoder baseline
//! * [`metrics`] PSNR, SSIM and dataset reports
//! * [`codec`] on-disk formats for compressed images, models and tensors

pub mod autoencoder;
pub mod codec;
pub mod error;
pub mod image_io;
pub mod masking;
pub mod metrics;
pub mod sparse_coder;
pub mod trainer;

mod geometry;

pub use error::{Error, Result};
pub use geometry::{Padding, PatchGeometry};
pub use image_io::{Dataset, ImageTensor, Split};
pub use masking::{MaskKind, PixelMask};
pub use sparse_coder::{Dictionary, LcaParams, SparseCode};

use ndarray::NdFloat;

/// Floating-point element type used throughout the crate.
///
/// Solvers run in `f32`; the gradient and oracle tests instantiate `f64`.
pub trait Real: NdFloat + std::iter::Sum {
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn lit(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn lit(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}
