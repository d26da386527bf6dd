//! Pixel-dropout masks defining the compressed representation.
//!
//! A mask is spatial: a kept position keeps all of its channels.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::image_io::ImageTensor;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// `(r + c + phase) % 2 == 0` is kept.
    Checkerboard { phase: u8 },
    /// `keep_count` positions drawn uniformly without replacement.
    Random { seed: u64, keep_count: u32 },
    /// Arbitrary pattern (complements, hand-built masks). Not serializable.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    kept: Vec<bool>,
    pub kind: MaskKind,
}

impl PixelMask {
    pub fn from_kept(height: usize, width: usize, kept: Vec<bool>) -> Result<Self> {
        if kept.len() != height * width {
            return Err(invalid(format!(
                "mask of {} entries for a {height}x{width} grid",
                kept.len()
            )));
        }
        Ok(Self {
            height,
            width,
            kept,
            kind: MaskKind::Explicit,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            kept: vec![true; height * width],
            kind: MaskKind::Explicit,
        }
    }

    #[inline]
    pub fn is_kept(&self, row: usize, col: usize) -> bool {
        self.kept[row * self.width + col]
    }

    /// Kept flags in row-major order.
    pub fn kept(&self) -> &[bool] {
        &self.kept
    }

    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    pub fn keep_fraction(&self) -> f64 {
        self.kept_count() as f64 / (self.height * self.width) as f64
    }

    /// Row-major indices of kept positions.
    pub fn kept_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.kept.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i)
    }

    pub fn complement(&self) -> Self {
        let kind = match self.kind {
            MaskKind::Checkerboard { phase } => MaskKind::Checkerboard { phase: 1 - phase },
            _ => MaskKind::Explicit,
        };
        Self {
            height: self.height,
            width: self.width,
            kept: self.kept.iter().map(|k| !k).collect(),
            kind,
        }
    }
}

pub fn checkerboard_mask(height: usize, width: usize, phase: u8) -> PixelMask {
    let phase = phase & 1;
    let kept = (0..height)
        .flat_map(|r| (0..width).map(move |c| (r + c + phase as usize) % 2 == 0))
        .collect();
    PixelMask {
        height,
        width,
        kept,
        kind: MaskKind::Checkerboard { phase },
    }
}

/// Seeded random mask keeping exactly `round(keep_fraction * H * W)` positions.
pub fn random_mask(height: usize, width: usize, keep_fraction: f64, seed: u64) -> Result<PixelMask> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(invalid(format!(
            "keep_fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    let count = (keep_fraction * (height * width) as f64).round() as usize;
    random_mask_with_count(height, width, count, seed)
}

/// Seeded random mask keeping exactly `keep_count` positions.
pub fn random_mask_with_count(
    height: usize,
    width: usize,
    keep_count: usize,
    seed: u64,
) -> Result<PixelMask> {
    let n = height * width;
    if keep_count > n || keep_count > u32::MAX as usize {
        return Err(invalid(format!(
            "cannot keep {keep_count} of {n} positions"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = vec![false; n];
    for i in index::sample(&mut rng, n, keep_count) {
        kept[i] = true;
    }
    Ok(PixelMask {
        height,
        width,
        kept,
        kind: MaskKind::Random {
            seed,
            keep_count: keep_count as u32,
        },
    })
}

/// Zero the omitted positions (all channels). Returns the masked image and
/// the number of kept values (kept positions times channels).
pub fn apply_mask<T: Real>(img: &ImageTensor<T>, mask: &PixelMask) -> Result<(ImageTensor<T>, usize)> {
    check_mask_shape(img, mask)?;
    let mut out = img.clone();
    let ch = img.channels;
    for (p, &keep) in mask.kept.iter().enumerate() {
        if !keep {
            out.data[p * ch..(p + 1) * ch].fill(T::zero());
        }
    }
    Ok((out, mask.kept_count() * ch))
}

pub(crate) fn check_mask_shape<T>(img: &ImageTensor<T>, mask: &PixelMask) -> Result<()> {
    if img.height != mask.height || img.width != mask.width {
        return Err(invalid(format!(
            "mask is {}x{} but image is {}x{}",
            mask.height, mask.width, img.height, img.width
        )));
    }
    Ok(())
}

/// SplitMix64 finalizer, used to derive independent seeds from a master seed.
pub fn mix_seed(master: u64, counter: u64) -> u64 {
    let mut z = master ^ counter.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
