//! Pixel-wise reconstruction quality: PSNR and SSIM.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::image_io::{Dataset, ImageTensor};
use crate::Real;

/// Aggregates replace an infinite PSNR (identical images) by this value.
pub const PSNR_CAP_DB: f64 = 100.0;

fn check_same<T, U>(a: &ImageTensor<T>, b: &ImageTensor<U>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(invalid(format!(
            "images differ in shape: {}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    Ok(())
}

pub fn mse<T: Real>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<f64> {
    check_same(a, b)?;
    if a.is_empty() {
        return Err(invalid("empty image"));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10 log10(peak² / MSE)` in dB; `+∞` for identical images.
pub fn psnr<T: Real>(a: &ImageTensor<T>, b: &ImageTensor<T>, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(invalid("peak must be positive"));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// [`psnr`] with the infinite case replaced by [`PSNR_CAP_DB`].
pub fn psnr_capped<T: Real>(a: &ImageTensor<T>, b: &ImageTensor<T>, peak: f64) -> Result<f64> {
    psnr(a, b, peak).map(|p| p.min(PSNR_CAP_DB))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SsimWindow {
    /// Square box window, every placement at stride 1, sample (N − 1)
    /// normalized variances.
    Uniform(usize),
    /// Gaussian-weighted square window.
    Gaussian { size: usize, sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimOptions {
    pub window: SsimWindow,
    pub peak: f64,
}

impl Default for SsimOptions {
    fn default() -> Self {
        Self {
            window: SsimWindow::Uniform(8),
            peak: 1.0,
        }
    }
}

/// Mean SSIM over all 8x8 windows and channels, peak 1.
pub fn ssim<T: Real>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<f64> {
    ssim_with(a, b, &SsimOptions::default())
}

pub fn ssim_with<T: Real>(a: &ImageTensor<T>, b: &ImageTensor<T>, opts: &SsimOptions) -> Result<f64> {
    check_same(a, b)?;
    let size = match opts.window {
        SsimWindow::Uniform(s) => s,
        SsimWindow::Gaussian { size, .. } => size,
    };
    if size == 0 || a.height < size || a.width < size {
        return Err(invalid(format!(
            "{}x{} image is smaller than the {size}x{size} SSIM window",
            a.height, a.width
        )));
    }
    let c1 = (0.01 * opts.peak).powi(2);
    let c2 = (0.03 * opts.peak).powi(2);
    let mut total = 0.0;
    for ch in 0..a.channels {
        let pa = plane(a, ch);
        let pb = plane(b, ch);
        total += match opts.window {
            SsimWindow::Uniform(s) => uniform_plane(&pa, &pb, a.height, a.width, s, c1, c2),
            SsimWindow::Gaussian { size, sigma } => {
                gaussian_plane(&pa, &pb, a.height, a.width, size, sigma, c1, c2)
            }
        };
    }
    Ok(total / a.channels as f64)
}

fn plane<T: Real>(img: &ImageTensor<T>, ch: usize) -> Vec<f64> {
    img.data
        .iter()
        .skip(ch)
        .step_by(img.channels)
        .map(|v| v.as_f64())
        .collect()
}

#[inline]
fn local_ssim(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// Summed-area table with a zero border: `t[(r+1)*(w+1) + c+1] = Σ x[..=r, ..=c]`.
fn integral(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut t = vec![0.0; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut run = 0.0;
        for c in 0..w {
            run += x[r * w + c];
            t[(r + 1) * (w + 1) + c + 1] = t[r * (w + 1) + c + 1] + run;
        }
    }
    t
}

fn uniform_plane(a: &[f64], b: &[f64], h: usize, w: usize, s: usize, c1: f64, c2: f64) -> f64 {
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let sa = integral(a, h, w);
    let sb = integral(b, h, w);
    let saa = integral(&prod(&|x, _| x * x), h, w);
    let sbb = integral(&prod(&|_, y| y * y), h, w);
    let sab = integral(&prod(&|x, y| x * y), h, w);
    let box_sum = |t: &[f64], r: usize, c: usize| {
        t[(r + s) * (w + 1) + c + s] - t[r * (w + 1) + c + s] - t[(r + s) * (w + 1) + c] + t[r * (w + 1) + c]
    };
    let n = (s * s) as f64;
    let unbias = if s * s > 1 { n / (n - 1.0) } else { 1.0 };
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - s {
        for c in 0..=w - s {
            let mu_a = box_sum(&sa, r, c) / n;
            let mu_b = box_sum(&sb, r, c) / n;
            let var_a = (box_sum(&saa, r, c) / n - mu_a * mu_a) * unbias;
            let var_b = (box_sum(&sbb, r, c) / n - mu_b * mu_b) * unbias;
            let cov = (box_sum(&sab, r, c) / n - mu_a * mu_b) * unbias;
            total += local_ssim(mu_a, mu_b, var_a, var_b, cov, c1, c2);
            count += 1;
        }
    }
    total / count as f64
}

#[allow(clippy::too_many_arguments)]
fn gaussian_plane(a: &[f64], b: &[f64], h: usize, w: usize, size: usize, sigma: f64, c1: f64, c2: f64) -> f64 {
    let half = (size as f64 - 1.0) / 2.0;
    let g1: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = g1.iter().sum::<f64>().powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - size {
        for c in 0..=w - size {
            let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dr in 0..size {
                for dc in 0..size {
                    let wt = g1[dr] * g1[dc] / norm;
                    let x = a[(r + dr) * w + c + dc];
                    let y = b[(r + dr) * w + c + dc];
                    ma += wt * x;
                    mb += wt * y;
                    maa += wt * x * x;
                    mbb += wt * y * y;
                    mab += wt * x * y;
                }
            }
            total += local_ssim(ma, mb, maa - ma * ma, mbb - mb * mb, mab - ma * mb, c1, c2);
            count += 1;
        }
    }
    total / count as f64
}

/// Per-image PSNR/SSIM of one reconstruction method, plus means.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    pub method_tag: String,
    /// `(psnr dB, ssim)` per image; PSNR is capped at [`PSNR_CAP_DB`].
    pub per_image: Vec<(f64, f64)>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl QualityReport {
    pub fn from_scores(method_tag: impl Into<String>, per_image: Vec<(f64, f64)>) -> Self {
        let n = per_image.len().max(1) as f64;
        let mean_psnr = per_image.iter().map(|s| s.0).sum::<f64>() / n;
        let mean_ssim = per_image.iter().map(|s| s.1).sum::<f64>() / n;
        Self {
            method_tag: method_tag.into(),
            per_image,
            mean_psnr,
            mean_ssim,
        }
    }

    /// `index,psnr,ssim` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,psnr,ssim\n");
        for (i, (p, s)) in self.per_image.iter().enumerate() {
            let _ = writeln!(out, "{i},{p:.6},{s:.6}");
        }
        out
    }

    /// `method,mean_psnr,mean_ssim,images` header plus one row per report.
    pub fn summary_csv(reports: &[QualityReport]) -> String {
        let mut out = String::from("method,mean_psnr,mean_ssim,images\n");
        for r in reports {
            let _ = writeln!(
                out,
                "{},{:.3},{:.3},{}",
                r.method_tag,
                r.mean_psnr,
                r.mean_ssim,
                r.per_image.len()
            );
        }
        out
    }

    pub fn table(reports: &[QualityReport]) -> String {
        let width = reports
            .iter()
            .map(|r| r.method_tag.len())
            .max()
            .unwrap_or(0)
            .max("Method".len());
        let mut out = format!("{:<width$}  {:>8}  {:>6}\n", "Method", "PSNR", "SSIM");
        let _ = writeln!(out, "{}", "-".repeat(width + 18));
        for r in reports {
            let _ = writeln!(out, "{:<width$}  {:>8.3}  {:>6.3}", r.method_tag, r.mean_psnr, r.mean_ssim);
        }
        out
    }
}

/// Score aligned reconstructions against originals. Reconstructions are
/// clamped to [0, 1] first.
pub fn evaluate_images(
    originals: &[ImageTensor<f32>],
    reconstructions: &[ImageTensor<f32>],
    tag: &str,
) -> Result<QualityReport> {
    if originals.len() != reconstructions.len() {
        return Err(invalid(format!(
            "{} originals but {} reconstructions",
            originals.len(),
            reconstructions.len()
        )));
    }
    let per_image = originals
        .par_iter()
        .zip(reconstructions.par_iter())
        .map(|(o, r)| {
            let r = r.clamped();
            Ok((psnr_capped(o, &r, 1.0)?, ssim(o, &r)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QualityReport::from_scores(tag, per_image))
}

pub fn evaluate_dataset(originals: &Dataset, reconstructions: &Dataset, tag: &str) -> Result<QualityReport> {
    evaluate_images(&originals.images, &reconstructions.images, tag)
}
