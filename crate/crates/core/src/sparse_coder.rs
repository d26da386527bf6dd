//! Convolutional sparse coding with a rectifying locally competitive
//! algorithm (LCA).
//!
//! The generative model is `image ≈ Σ_k atom_k ⊛ a_k`: every active unit adds
//! its atom, scaled by its activation, at its strided grid offset. Inference
//! minimizes
//!
//! ```text
//! E(a) = ½ Σ_kept (I − φ*a)² + λ Σ a,    a ≥ 0
//! ```
//!
//! where the squared error only runs over pixels the mask keeps. The LCA
//! dynamics are integrated in residual form,
//!
//! ```text
//! u ← u + η (φᵀ ⊛ (mask ⊙ (I − φ*a)) − u + a),    a = max(u − λ, 0)
//! ```
//!
//! which has the same fixed points as the lateral-inhibition form
//! `u ← u + η (φᵀI − u − (φᵀφ − 1) a)` without building the Gram matrix.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::geometry::{Padding, PatchGeometry};
use crate::image_io::ImageTensor;
use crate::masking::{apply_mask, check_mask_shape, PixelMask};
use crate::Real;

/// Bank of `K` convolutional atoms, each `patch_h x patch_w x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary<T = f32> {
    /// `K x (patch_h * patch_w * channels)`, one atom per row.
    pub atoms: Array2<T>,
    pub patch_h: usize,
    pub patch_w: usize,
    pub channels: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl<T: Real> Dictionary<T> {
    pub fn new(
        atoms: Array2<T>,
        (patch_h, patch_w): (usize, usize),
        channels: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if atoms.ncols() != patch_h * patch_w * channels {
            return Err(invalid(format!(
                "atoms have {} values, expected {patch_h}x{patch_w}x{channels}",
                atoms.ncols()
            )));
        }
        if atoms.nrows() == 0 || stride == 0 {
            return Err(invalid("dictionary needs at least one atom and a positive stride"));
        }
        Ok(Self {
            atoms: atoms.as_standard_layout().into_owned(),
            patch_h,
            patch_w,
            channels,
            stride,
            padding,
        })
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn atom_len(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn atom(&self, k: usize) -> ArrayView1<'_, T> {
        self.atoms.row(k)
    }

    pub fn geometry(&self, image_h: usize, image_w: usize) -> Result<PatchGeometry> {
        PatchGeometry::new(
            (image_h, image_w, self.channels),
            (self.patch_h, self.patch_w),
            self.stride,
            self.padding,
        )
    }

    fn geometry_for<U>(&self, img: &ImageTensor<U>) -> Result<PatchGeometry> {
        if img.channels != self.channels {
            return Err(invalid(format!(
                "image has {} channels, dictionary {}",
                img.channels, self.channels
            )));
        }
        self.geometry(img.height, img.width)
    }

    /// Rescale every atom to unit L2 norm. Returns indices of atoms whose norm
    /// was zero (or non-finite); those are left untouched.
    pub fn normalize(&mut self) -> Vec<usize> {
        let mut degenerate = Vec::new();
        for (k, mut row) in self.atoms.outer_iter_mut().enumerate() {
            let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            if norm > 1e-12 && norm.is_finite() {
                let inv = T::lit(1.0 / norm);
                row.mapv_inplace(|v| v * inv);
            } else {
                degenerate.push(k);
            }
        }
        degenerate
    }

    /// Largest deviation of an atom norm from one.
    pub fn max_norm_deviation(&self) -> f64 {
        self.atoms
            .outer_iter()
            .map(|row| (row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Code coefficients per input value for a given image size.
    pub fn overcompleteness(&self, image_h: usize, image_w: usize) -> Result<f64> {
        let g = self.geometry(image_h, image_w)?;
        Ok((g.positions() * self.num_atoms()) as f64 / g.image_len() as f64)
    }

    pub fn cast<U: Real>(&self) -> Dictionary<U> {
        Dictionary {
            atoms: self.atoms.mapv(|v| U::lit(v.as_f64())),
            patch_h: self.patch_h,
            patch_w: self.patch_w,
            channels: self.channels,
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// Non-negative activations on the `grid_h x grid_w` lattice, `K` per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode<T = f32> {
    /// `(grid_h * grid_w) x K`, row-major over the grid.
    pub activations: Array2<T>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub lambda: f64,
}

impl<T: Real> SparseCode<T> {
    pub fn zeros(grid_h: usize, grid_w: usize, atoms: usize, lambda: f64) -> Self {
        Self {
            activations: Array2::zeros((grid_h * grid_w, atoms)),
            grid_h,
            grid_w,
            lambda,
        }
    }

    pub fn for_image(dict: &Dictionary<T>, image_h: usize, image_w: usize, lambda: f64) -> Result<Self> {
        let g = dict.geometry(image_h, image_w)?;
        Ok(Self::zeros(g.grid_h, g.grid_w, dict.num_atoms(), lambda))
    }

    pub fn nonzeros(&self) -> usize {
        self.activations.iter().filter(|&&v| v > T::zero()).count()
    }

    pub fn l1(&self) -> f64 {
        self.activations.iter().map(|v| v.as_f64().abs()).sum()
    }
}

/// Fraction of strictly positive activations.
pub fn sparsity<T: Real>(code: &SparseCode<T>) -> f64 {
    let total = code.activations.len();
    if total == 0 {
        return 0.0;
    }
    code.nonzeros() as f64 / total as f64
}

/// Rectified soft threshold `max(u − λ, 0)`.
#[inline]
pub fn threshold<T: Real>(u: T, lambda: T) -> T {
    (u - lambda).max(T::zero())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LcaParams {
    pub lambda: f64,
    /// Integration step η = Δt / τ.
    pub step: f64,
    pub iterations: usize,
    /// Stop once the relative energy change of one step falls below this
    /// (and the active set did not change on that step).
    pub tol: f64,
}

impl Default for LcaParams {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            step: 0.05,
            iterations: 400,
            tol: 1e-5,
        }
    }
}

impl LcaParams {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.step > 0.0 && self.step <= 1.0) {
            return Err(invalid(format!("step must lie in (0, 1], got {}", self.step)));
        }
        if self.iterations == 0 {
            return Err(invalid("iterations must be at least 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(invalid("tol must be non-negative"));
        }
        Ok(())
    }
}

fn check_code<T: Real>(dict: &Dictionary<T>, code: &SparseCode<T>, g: &PatchGeometry) -> Result<()> {
    if code.grid_h != g.grid_h
        || code.grid_w != g.grid_w
        || code.activations.dim() != (g.positions(), dict.num_atoms())
    {
        return Err(invalid(format!(
            "code is {}x{}x{} but the image needs {}x{}x{}",
            code.grid_h,
            code.grid_w,
            code.activations.ncols(),
            g.grid_h,
            g.grid_w,
            dict.num_atoms()
        )));
    }
    Ok(())
}

// Below this density the scatter loop beats a dense GEMM.
const SPARSE_DENSITY: f64 = 0.08;

fn reconstruct_into<T: Real>(
    dict: &Dictionary<T>,
    acts: &Array2<T>,
    g: &PatchGeometry,
    patches: &mut Array2<T>,
    out: &mut [T],
) {
    out.fill(T::zero());
    let nnz = acts.iter().filter(|&&v| v != T::zero()).count();
    if (nnz as f64) < SPARSE_DENSITY * acts.len() as f64 {
        for (pos, row) in acts.outer_iter().enumerate() {
            for (k, &a) in row.iter().enumerate() {
                if a != T::zero() {
                    let atom = dict.atoms.row(k);
                    g.add_patch(pos, atom.as_slice().expect("contiguous atom"), a, out);
                }
            }
        }
    } else {
        general_mat_mul(T::one(), acts, &dict.atoms, T::zero(), patches);
        g.col2im_add(patches.view(), out);
    }
}

/// `φ * a`: sum of every active atom placed at its grid offset.
pub fn reconstruct<T: Real>(
    dict: &Dictionary<T>,
    code: &SparseCode<T>,
    (height, width): (usize, usize),
) -> Result<ImageTensor<T>> {
    let g = dict.geometry(height, width)?;
    check_code(dict, code, &g)?;
    let mut out = ImageTensor::zeros(height, width, dict.channels);
    let mut patches = Array2::zeros((g.positions(), g.patch_len()));
    reconstruct_into(dict, &code.activations, &g, &mut patches, &mut out.data);
    Ok(out)
}

/// `φᵀ ⊛ x`: inner product of every atom with every patch of `x`. The
/// adjoint of [`reconstruct`]; result is `positions x K`.
pub fn correlate<T: Real>(dict: &Dictionary<T>, img: &ImageTensor<T>) -> Result<Array2<T>> {
    let g = dict.geometry_for(img)?;
    let cols = g.im2col(&img.data);
    Ok(cols.dot(&dict.atoms.t()))
}

/// Masked sparse-coding objective: `½ Σ_kept (I − φ*a)² + λ Σ |a|`.
pub fn energy<T: Real>(
    img: &ImageTensor<T>,
    mask: &PixelMask,
    dict: &Dictionary<T>,
    code: &SparseCode<T>,
    lambda: f64,
) -> Result<f64> {
    check_mask_shape(img, mask)?;
    let recon = reconstruct(dict, code, (img.height, img.width))?;
    let mut residual = vec![T::zero(); img.len()];
    masked_residual(img, &recon.data, mask, &mut residual);
    Ok(half_sq(&residual) + lambda * code.l1())
}

fn masked_residual<T: Real>(img: &ImageTensor<T>, recon: &[T], mask: &PixelMask, out: &mut [T]) {
    let ch = img.channels;
    for (p, &keep) in mask.kept().iter().enumerate() {
        let span = p * ch..(p + 1) * ch;
        if keep {
            for i in span {
                out[i] = img.data[i] - recon[i];
            }
        } else {
            out[span].fill(T::zero());
        }
    }
}

fn half_sq<T: Real>(v: &[T]) -> f64 {
    0.5 * v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>()
}

/// Result of an LCA run with its energy trace.
#[derive(Debug, Clone)]
pub struct LcaOutcome<T = f32> {
    pub code: SparseCode<T>,
    /// Energy of the starting point followed by the energy after every step.
    pub energies: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Sparse code of `img` over `dict`, fitting only the pixels `mask` keeps.
pub fn lca_encode<T: Real>(
    img: &ImageTensor<T>,
    mask: &PixelMask,
    dict: &Dictionary<T>,
    params: &LcaParams,
) -> Result<SparseCode<T>> {
    lca_encode_traced(img, mask, dict, params).map(|o| o.code)
}

pub fn lca_encode_traced<T: Real>(
    img: &ImageTensor<T>,
    mask: &PixelMask,
    dict: &Dictionary<T>,
    params: &LcaParams,
) -> Result<LcaOutcome<T>> {
    params.validate()?;
    check_mask_shape(img, mask)?;
    let g = dict.geometry_for(img)?;
    let k = dict.num_atoms();
    let lambda = T::lit(params.lambda);
    let eta = T::lit(params.step);

    let mut u = Array2::<T>::zeros((g.positions(), k));
    let mut acts = Array2::<T>::zeros((g.positions(), k));
    let mut drive = Array2::<T>::zeros((g.positions(), k));
    let mut cols = Array2::<T>::zeros((g.positions(), g.patch_len()));
    let mut recon = vec![T::zero(); img.len()];
    let mut residual = vec![T::zero(); img.len()];

    masked_residual(img, &recon, mask, &mut residual);
    let mut energies = Vec::with_capacity(params.iterations + 1);
    let mut e_prev = half_sq(&residual);
    energies.push(e_prev);

    let mut converged = false;
    let mut rising = 0usize;
    let mut iterations = 0;
    for it in 0..params.iterations {
        g.im2col_into(&residual, &mut cols);
        general_mat_mul(T::one(), &cols, &dict.atoms.t(), T::zero(), &mut drive);

        // With a = 0, u relaxes monotonically toward the feed-forward drive,
        // so if no drive exceeds λ the zero code is the fixed point.
        if it == 0 && drive.iter().all(|&d| d <= lambda) {
            converged = true;
            break;
        }

        let mut active_changed = false;
        ndarray::Zip::from(&mut u)
            .and(&mut acts)
            .and(&drive)
            .for_each(|u, a, &d| {
                *u = *u + eta * (d - *u + *a);
                let next = threshold(*u, lambda);
                active_changed |= (next > T::zero()) != (*a > T::zero());
                *a = next;
            });

        reconstruct_into(dict, &acts, &g, &mut cols, &mut recon);
        masked_residual(img, &recon, mask, &mut residual);
        let l1: f64 = acts.iter().map(|v| v.as_f64()).sum();
        let e = half_sq(&residual) + params.lambda * l1;
        energies.push(e);
        iterations = it + 1;

        if !e.is_finite() {
            return Err(Error::SolverDiverged {
                iteration: iterations,
                suggested_step: params.step / 2.0,
            });
        }
        if e > 1.1 * e_prev {
            rising += 1;
            if rising >= 5 {
                return Err(Error::SolverDiverged {
                    iteration: iterations,
                    suggested_step: params.step / 2.0,
                });
            }
        } else {
            rising = 0;
        }

        let rel = (e - e_prev).abs() / e_prev.abs().max(f64::MIN_POSITIVE);
        e_prev = e;
        if l1 > 0.0 && !active_changed && rel < params.tol {
            converged = true;
            break;
        }
    }

    Ok(LcaOutcome {
        code: SparseCode {
            activations: acts,
            grid_h: g.grid_h,
            grid_w: g.grid_w,
            lambda: params.lambda,
        },
        energies,
        iterations,
        converged,
    })
}

/// Encode a batch concurrently; results keep the input order.
pub fn encode_batch<T: Real>(
    images: &[ImageTensor<T>],
    masks: &[&PixelMask],
    dict: &Dictionary<T>,
    params: &LcaParams,
) -> Result<Vec<SparseCode<T>>> {
    if images.len() != masks.len() {
        return Err(invalid("one mask per image required"));
    }
    images
        .par_iter()
        .zip(masks.par_iter())
        .map(|(img, mask)| lca_encode(img, mask, dict, params))
        .collect()
}

/// Per-channel mean over the kept pixels; zero when nothing is kept.
pub fn kept_mean<T: Real>(img: &ImageTensor<T>, mask: &PixelMask) -> Result<Vec<T>> {
    check_mask_shape(img, mask)?;
    let ch = img.channels;
    let mut sum = vec![0.0f64; ch];
    let mut n = 0usize;
    for p in mask.kept_positions() {
        for (s, v) in sum.iter_mut().zip(&img.data[p * ch..(p + 1) * ch]) {
            *s += v.as_f64();
        }
        n += 1;
    }
    Ok(sum.into_iter().map(|s| T::lit(if n == 0 { 0.0 } else { s / n as f64 })).collect())
}

/// Add `offset[c]` to every value of channel `c`.
pub fn shift_channels<T: Real>(img: &ImageTensor<T>, offset: &[T]) -> ImageTensor<T> {
    let mut out = img.clone();
    for px in out.data.chunks_exact_mut(img.channels) {
        for (v, &o) in px.iter_mut().zip(offset) {
            *v += o;
        }
    }
    out
}

/// Fill in the omitted pixels of `img` from its sparse code.
///
/// The code models the image minus the mean of its kept pixels (per
/// channel), which the decoder can always recompute from the stored pixels;
/// the mean is added back to `φ*a`. Trained atoms then need no shared DC
/// component, which keeps the masked Gram operator small enough for the
/// default step.
///
/// With `overwrite_kept`, kept positions carry their original values and only
/// omitted positions come from the reconstruction; otherwise the raw
/// reconstruction is returned everywhere. Values at omitted positions of
/// `img` are ignored.
pub fn inpaint<T: Real>(
    img: &ImageTensor<T>,
    mask: &PixelMask,
    dict: &Dictionary<T>,
    params: &LcaParams,
    overwrite_kept: bool,
) -> Result<(ImageTensor<T>, SparseCode<T>)> {
    let mean = kept_mean(img, mask)?;
    let neg: Vec<T> = mean.iter().map(|&m| -m).collect();
    let code = lca_encode(&shift_channels(img, &neg), mask, dict, params)?;
    let mut recon = shift_channels(&reconstruct(dict, &code, (img.height, img.width))?, &mean);
    if overwrite_kept {
        let (known, _) = apply_mask(img, mask)?;
        let ch = img.channels;
        for p in mask.kept_positions() {
            recon.data[p * ch..(p + 1) * ch].copy_from_slice(&known.data[p * ch..(p + 1) * ch]);
        }
    }
    Ok((recon, code))
}
