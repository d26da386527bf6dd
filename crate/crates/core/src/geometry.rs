use ndarray::{Array2, ArrayView2};

use crate::error::{invalid, Result};
use crate::Real;

/// How the grid of patch offsets covers the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// `ceil(H / stride)` offsets per axis, starting at `-(patch - stride) / 2`.
    /// Patch content falling outside the image is discarded (zero padding).
    #[default]
    Same,
    /// Only offsets whose patch lies fully inside the image.
    Valid,
}

impl Padding {
    pub fn tag(self) -> u8 {
        match self {
            Padding::Same => 0,
            Padding::Valid => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Padding::Same),
            1 => Some(Padding::Valid),
            _ => None,
        }
    }
}

impl std::str::FromStr for Padding {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(Padding::Same),
            "valid" => Ok(Padding::Valid),
            other => Err(invalid(format!("unknown padding `{other}`"))),
        }
    }
}

/// Placement of strided patches on an image.
///
/// Grid cell `(gr, gc)` covers image rows `gr * stride - pad_h ..` and columns
/// `gc * stride - pad_w ..`, `patch_h x patch_w` pixels, all channels. A patch
/// is flattened in the same (row, column, channel) order as images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchGeometry {
    pub fn new(
        (image_h, image_w, channels): (usize, usize, usize),
        (patch_h, patch_w): (usize, usize),
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 || patch_h == 0 || patch_w == 0 || channels == 0 {
            return Err(invalid("patch, stride and channels must be positive"));
        }
        if image_h == 0 || image_w == 0 {
            return Err(invalid("image must be non-empty"));
        }
        let (grid_h, grid_w, pad_h, pad_w) = match padding {
            Padding::Same => (
                image_h.div_ceil(stride),
                image_w.div_ceil(stride),
                patch_h.saturating_sub(stride) / 2,
                patch_w.saturating_sub(stride) / 2,
            ),
            Padding::Valid => {
                if patch_h > image_h || patch_w > image_w {
                    return Err(invalid(format!(
                        "{patch_h}x{patch_w} patch does not fit a {image_h}x{image_w} image"
                    )));
                }
                ((image_h - patch_h) / stride + 1, (image_w - patch_w) / stride + 1, 0, 0)
            }
        };
        Ok(Self {
            image_h,
            image_w,
            channels,
            patch_h,
            patch_w,
            stride,
            pad_h,
            pad_w,
            grid_h,
            grid_w,
        })
    }

    pub fn positions(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch_len(&self) -> usize {
        self.patch_h * self.patch_w * self.channels
    }

    pub fn image_len(&self) -> usize {
        self.image_h * self.image_w * self.channels
    }

    #[inline]
    fn origin(&self, pos: usize) -> (isize, isize) {
        let gr = pos / self.grid_w;
        let gc = pos % self.grid_w;
        (
            (gr * self.stride) as isize - self.pad_h as isize,
            (gc * self.stride) as isize - self.pad_w as isize,
        )
    }

    /// Visit every in-image row segment of patch `pos`: calls
    /// `f(image_offset, patch_offset, len)` for contiguous runs of values.
    #[inline]
    fn for_each_run(&self, pos: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (r0, c0) = self.origin(pos);
        let ch = self.channels;
        let c_lo = c0.max(0);
        let c_hi = (c0 + self.patch_w as isize).min(self.image_w as isize);
        if c_lo >= c_hi {
            return;
        }
        let len = (c_hi - c_lo) as usize * ch;
        let dc = (c_lo - c0) as usize;
        for dr in 0..self.patch_h {
            let r = r0 + dr as isize;
            if r < 0 || r >= self.image_h as isize {
                continue;
            }
            let img_off = (r as usize * self.image_w + c_lo as usize) * ch;
            let patch_off = (dr * self.patch_w + dc) * ch;
            f(img_off, patch_off, len);
        }
    }

    /// Gather every patch into a `positions x patch_len` matrix.
    pub fn im2col<T: Real>(&self, image: &[T]) -> Array2<T> {
        let mut cols = Array2::zeros((self.positions(), self.patch_len()));
        self.im2col_into(image, &mut cols);
        cols
    }

    pub fn im2col_into<T: Real>(&self, image: &[T], cols: &mut Array2<T>) {
        debug_assert_eq!(image.len(), self.image_len());
        cols.fill(T::zero());
        let data = cols.as_slice_mut().expect("standard layout");
        let plen = self.patch_len();
        for pos in 0..self.positions() {
            let row = &mut data[pos * plen..(pos + 1) * plen];
            self.for_each_run(pos, |io, po, len| {
                row[po..po + len].copy_from_slice(&image[io..io + len]);
            });
        }
    }

    /// Scatter-add patch rows back onto an image (adjoint of [`im2col`]).
    pub fn col2im_add<T: Real>(&self, cols: ArrayView2<T>, image: &mut [T]) {
        let plen = self.patch_len();
        for (pos, row) in cols.outer_iter().enumerate() {
            let row = row.as_slice().expect("contiguous row");
            debug_assert_eq!(row.len(), plen);
            self.add_patch(pos, row, T::one(), image);
        }
    }

    /// `image[patch pos] += scale * patch`.
    #[inline]
    pub fn add_patch<T: Real>(&self, pos: usize, patch: &[T], scale: T, image: &mut [T]) {
        self.for_each_run(pos, |io, po, len| {
            for (dst, &src) in image[io..io + len].iter_mut().zip(&patch[po..po + len]) {
                *dst += scale * src;
            }
        });
    }

    /// `out += scale * patch(pos) of image` (zero outside the image).
    #[inline]
    pub fn accumulate_patch<T: Real>(&self, pos: usize, image: &[T], scale: T, out: &mut [T]) {
        self.for_each_run(pos, |io, po, len| {
            for (dst, &src) in out[po..po + len].iter_mut().zip(&image[io..io + len]) {
                *dst += scale * src;
            }
        });
    }
}
