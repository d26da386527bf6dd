//! Independent reference implementations used by the integration tests.
//! Everything here is plain nested loops in f64 and shares no code path
//! with the library beyond its data types.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsecomp::{Dictionary, ImageTensor, Padding, PixelMask};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize) -> ImageTensor<f64> {
    ImageTensor::from_vec(h, w, ch, (0..h * w * ch).map(|_| rng.random::<f64>()).collect()).unwrap()
}

pub fn random_dict(
    rng: &mut ChaCha8Rng,
    k: usize,
    patch: usize,
    ch: usize,
    stride: usize,
    padding: Padding,
) -> Dictionary<f64> {
    let len = patch * patch * ch;
    let mut atoms = Array2::from_shape_fn((k, len), |_| rng.random_range(-1.0..1.0));
    for mut row in atoms.rows_mut() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.mapv_inplace(|v| v / n);
    }
    Dictionary::new(atoms, (patch, patch), ch, stride, padding).unwrap()
}

/// Grid size and top-left offset of the code grid along one axis.
fn axis(n: usize, patch: usize, stride: usize, padding: Padding) -> (usize, isize) {
    match padding {
        Padding::Same => (n.div_ceil(stride), (patch.saturating_sub(stride) / 2) as isize),
        Padding::Valid => ((n - patch) / stride + 1, 0),
    }
}

pub fn grid(dict: &Dictionary<f64>, h: usize, w: usize) -> (usize, usize) {
    (
        axis(h, dict.patch_h, dict.stride, dict.padding).0,
        axis(w, dict.patch_w, dict.stride, dict.padding).0,
    )
}

/// Sum of `acts[pos, k] * atom_k` at every grid offset, clipped to the image.
pub fn loop_reconstruct(dict: &Dictionary<f64>, acts: &Array2<f64>, h: usize, w: usize) -> Vec<f64> {
    let ch = dict.channels;
    let (gh, pad_h) = axis(h, dict.patch_h, dict.stride, dict.padding);
    let (gw, pad_w) = axis(w, dict.patch_w, dict.stride, dict.padding);
    let mut out = vec![0.0; h * w * ch];
    for gr in 0..gh {
        for gc in 0..gw {
            for k in 0..dict.num_atoms() {
                let a = acts[[gr * gw + gc, k]];
                if a == 0.0 {
                    continue;
                }
                for dy in 0..dict.patch_h {
                    for dx in 0..dict.patch_w {
                        let r = (gr * dict.stride + dy) as isize - pad_h;
                        let c = (gc * dict.stride + dx) as isize - pad_w;
                        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                            continue;
                        }
                        for z in 0..ch {
                            out[(r as usize * w + c as usize) * ch + z] +=
                                a * dict.atoms[[k, (dy * dict.patch_w + dx) * ch + z]];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `½ Σ_kept (I − φ*a)² + λ Σ a`.
pub fn loop_energy(
    img: &ImageTensor<f64>,
    mask: &PixelMask,
    dict: &Dictionary<f64>,
    acts: &Array2<f64>,
    lambda: f64,
) -> f64 {
    let recon = loop_reconstruct(dict, acts, img.height, img.width);
    let ch = img.channels;
    let mut sq = 0.0;
    for r in 0..img.height {
        for c in 0..img.width {
            if !mask.is_kept(r, c) {
                continue;
            }
            for z in 0..ch {
                let i = (r * img.width + c) * ch + z;
                sq += (img.data[i] - recon[i]).powi(2);
            }
        }
    }
    0.5 * sq + lambda * acts.iter().map(|v| v.abs()).sum::<f64>()
}

/// Non-negative lasso on the masked objective by cyclic coordinate descent.
/// Returns the minimizing activations and the objective value.
pub fn coordinate_descent(
    img: &ImageTensor<f64>,
    mask: &PixelMask,
    dict: &Dictionary<f64>,
    lambda: f64,
) -> (Array2<f64>, f64) {
    let (h, w, ch) = (img.height, img.width, img.channels);
    let (gh, gw) = grid(dict, h, w);
    let units = gh * gw * dict.num_atoms();
    let k = dict.num_atoms();

    // explicit synthesis matrix restricted to kept pixels
    let kept: Vec<usize> = (0..h * w)
        .filter(|&p| mask.is_kept(p / w, p % w))
        .flat_map(|p| (0..ch).map(move |z| p * ch + z))
        .collect();
    let mut cols = Vec::with_capacity(units);
    for u in 0..units {
        let mut impulse = Array2::zeros((gh * gw, k));
        impulse[[u / k, u % k]] = 1.0;
        let full = loop_reconstruct(dict, &impulse, h, w);
        cols.push(kept.iter().map(|&i| full[i]).collect::<Vec<f64>>());
    }
    let target: Vec<f64> = kept.iter().map(|&i| img.data[i]).collect();

    let mut a = vec![0.0; units];
    let mut resid = target.clone();
    for _ in 0..200_000 {
        let mut biggest = 0.0f64;
        for u in 0..units {
            let norm2: f64 = cols[u].iter().map(|v| v * v).sum();
            if norm2 == 0.0 {
                continue;
            }
            let corr: f64 = cols[u].iter().zip(&resid).map(|(c, r)| c * r).sum();
            let next = ((corr + norm2 * a[u] - lambda) / norm2).max(0.0);
            let delta = next - a[u];
            if delta != 0.0 {
                for (r, c) in resid.iter_mut().zip(&cols[u]) {
                    *r -= delta * c;
                }
                a[u] = next;
                biggest = biggest.max(delta.abs());
            }
        }
        if biggest < 1e-14 {
            break;
        }
    }
    let acts = Array2::from_shape_vec((gh * gw, k), a).unwrap();
    let e = loop_energy(img, mask, dict, &acts, lambda);
    (acts, e)
}

/// Mean SSIM over every `s x s` window at stride 1 and every channel, with
/// sample statistics computed in two passes.
pub fn loop_ssim(a: &ImageTensor<f64>, b: &ImageTensor<f64>, s: usize, peak: f64) -> f64 {
    let (h, w, ch) = (a.height, a.width, a.channels);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = (s * s) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for z in 0..ch {
        for r in 0..=h - s {
            for c in 0..=w - s {
                let px = |img: &ImageTensor<f64>, dr: usize, dc: usize| img.data[((r + dr) * w + c + dc) * ch + z];
                let (mut ma, mut mb) = (0.0, 0.0);
                for dr in 0..s {
                    for dc in 0..s {
                        ma += px(a, dr, dc);
                        mb += px(b, dr, dc);
                    }
                }
                ma /= n;
                mb /= n;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for dr in 0..s {
                    for dc in 0..s {
                        let x = px(a, dr, dc) - ma;
                        let y = px(b, dr, dc) - mb;
                        va += x * x;
                        vb += y * y;
                        cov += x * y;
                    }
                }
                va /= n - 1.0;
                vb /= n - 1.0;
                cov /= n - 1.0;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// `½ ‖I − φ*a‖²` over every pixel.
pub fn full_half_sq_error(img: &ImageTensor<f64>, dict: &Dictionary<f64>, acts: &Array2<f64>) -> f64 {
    let recon = loop_reconstruct(dict, acts, img.height, img.width);
    0.5 * img.data.iter().zip(&recon).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
}

/// `‖x − ReLU(W'·ReLU(conv(W, x) + b) + b')‖²` by scalar loops.
#[allow(clippy::too_many_arguments)]
pub fn loop_ae_loss(
    x: &ImageTensor<f64>,
    enc_w: &Array2<f64>,
    enc_b: &[f64],
    dec_w: Option<&Array2<f64>>,
    dec_b: &[f64],
    kernel: usize,
    stride: usize,
) -> f64 {
    let (h, w, ch) = (x.height, x.width, x.channels);
    let oc = enc_w.nrows();
    let (gh, pad) = axis(h, kernel, stride, Padding::Same);
    let (gw, _) = axis(w, kernel, stride, Padding::Same);
    let at = |r: isize, c: isize, z: usize| {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            x.data[(r as usize * w + c as usize) * ch + z]
        }
    };
    // code laid out (position, channel)
    let mut code = vec![0.0; gh * gw * oc];
    for gr in 0..gh {
        for gc in 0..gw {
            for o in 0..oc {
                let mut s = enc_b[o];
                for dy in 0..kernel {
                    for dx in 0..kernel {
                        for z in 0..ch {
                            let r = (gr * stride + dy) as isize - pad;
                            let c = (gc * stride + dx) as isize - pad;
                            s += enc_w[[o, (dy * kernel + dx) * ch + z]] * at(r, c, z);
                        }
                    }
                }
                code[(gr * gw + gc) * oc + o] = s.max(0.0);
            }
        }
    }
    let n = h * w * ch;
    let mut out = dec_b.to_vec();
    match dec_w {
        Some(m) => {
            for i in 0..n {
                for (j, &v) in code.iter().enumerate() {
                    out[i] += m[[i, j]] * v;
                }
            }
        }
        None => {
            for gr in 0..gh {
                for gc in 0..gw {
                    for o in 0..oc {
                        let v = code[(gr * gw + gc) * oc + o];
                        for dy in 0..kernel {
                            for dx in 0..kernel {
                                let r = (gr * stride + dy) as isize - pad;
                                let c = (gc * stride + dx) as isize - pad;
                                if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                                    continue;
                                }
                                for z in 0..ch {
                                    out[(r as usize * w + c as usize) * ch + z] +=
                                        enc_w[[o, (dy * kernel + dx) * ch + z]] * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out.iter()
        .zip(&x.data)
        .map(|(&z, &t)| (z.max(0.0) - t).powi(2))
        .sum()
}

/// `‖a − b‖ / max(‖b‖, tiny)` over flattened arrays.
pub fn rel_error<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in a.into_iter().zip(b) {
        num += (x - y).powi(2);
        den += y * y;
    }
    num.sqrt() / den.sqrt().max(1e-300)
}

/// Relative error of `dict_gradient` against central differences of the
/// full-image `½‖I − φ*a‖²`, on one random instance.
pub fn dict_gradient_fd_error(seed: u64) -> f64 {
    use sparsecomp::sparse_coder::SparseCode;
    use sparsecomp::trainer::dict_gradient;

    let mut r = rng(seed);
    let ch = [1, 3][r.random_range(0..2)];
    let k = r.random_range(1..=4);
    let patch = r.random_range(2..=4);
    let stride = r.random_range(1..=2);
    let padding = if r.random() { Padding::Same } else { Padding::Valid };
    let (h, w) = (r.random_range(patch..=8), r.random_range(patch..=8));
    let img = random_image(&mut r, h, w, ch);
    let mut dict = random_dict(&mut r, k, patch, ch, stride, padding);
    let (gh, gw) = grid(&dict, h, w);
    let acts = Array2::from_shape_fn((gh * gw, k), |_| {
        if r.random::<f64>() < 0.5 {
            0.0
        } else {
            r.random_range(0.0..1.0)
        }
    });
    let code = SparseCode {
        activations: acts.clone(),
        grid_h: gh,
        grid_w: gw,
        lambda: 0.1,
    };
    let grad = dict_gradient(&img, &code, &dict).unwrap();

    let step = 1e-5;
    let mut fd = Array2::zeros(dict.atoms.raw_dim());
    for i in 0..dict.atoms.nrows() {
        for j in 0..dict.atoms.ncols() {
            let orig = dict.atoms[[i, j]];
            dict.atoms[[i, j]] = orig + step;
            let up = full_half_sq_error(&img, &dict, &acts);
            dict.atoms[[i, j]] = orig - step;
            let down = full_half_sq_error(&img, &dict, &acts);
            dict.atoms[[i, j]] = orig;
            // the gradient points downhill
            fd[[i, j]] = -(up - down) / (2.0 * step);
        }
    }
    rel_error(grad.iter(), fd.iter())
}

/// Relative error of `ae_backward` against central differences of the loop
/// loss oracle, on one random small network.
pub fn ae_backward_fd_error(seed: u64, tied: bool) -> f64 {
    use sparsecomp::autoencoder::{ae_backward, AeConfig, AutoencoderParams};

    let mut r = rng(seed);
    let ch = r.random_range(1..=3);
    let kernel = r.random_range(2..=4);
    let stride = r.random_range(2..=kernel);
    let side = r.random_range(kernel..=8);
    let cfg = AeConfig {
        image: (side, side, ch),
        kernel: (kernel, kernel),
        stride,
        out_channels: r.random_range(1..=3),
        tied_weights: tied,
        init_seed: seed,
        ..AeConfig::default()
    };
    let mut p = AutoencoderParams::<f64>::init(&cfg).unwrap();
    p.enc_w.mapv_inplace(|_| r.random_range(-0.5..0.5));
    p.enc_b.mapv_inplace(|_| r.random_range(0.0..0.3));
    if let Some(w) = p.dec_w.as_mut() {
        w.mapv_inplace(|_| r.random_range(-0.5..0.5));
    }
    p.dec_b.mapv_inplace(|_| r.random_range(0.0..0.5));
    let x = random_image(&mut r, side, side, ch);
    let g = ae_backward(&p, &x).unwrap();

    let loss = |p: &AutoencoderParams<f64>| {
        loop_ae_loss(
            &x,
            &p.enc_w,
            p.enc_b.as_slice().unwrap(),
            p.dec_w.as_ref(),
            p.dec_b.as_slice().unwrap(),
            kernel,
            stride,
        )
    };
    let step = 1e-5;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    fn slot(p: &mut AutoencoderParams<f64>, tensor: usize, i: usize) -> &mut f64 {
        let s = match tensor {
            0 => p.enc_w.as_slice_mut(),
            1 => p.enc_b.as_slice_mut(),
            2 => p.dec_w.as_mut().unwrap().as_slice_mut(),
            _ => p.dec_b.as_slice_mut(),
        };
        &mut s.unwrap()[i]
    }
    let tensors: Vec<(usize, Vec<f64>)> = [
        Some((0, g.enc_w.iter().copied().collect())),
        Some((1, g.enc_b.to_vec())),
        g.dec_w.as_ref().map(|w| (2, w.iter().copied().collect())),
        Some((3, g.dec_b.to_vec())),
    ]
    .into_iter()
    .flatten()
    .collect();
    for (t, grad) in tensors {
        for (i, &gv) in grad.iter().enumerate() {
            let orig = *slot(&mut p, t, i);
            *slot(&mut p, t, i) = orig + step;
            let up = loss(&p);
            *slot(&mut p, t, i) = orig - step;
            let down = loss(&p);
            *slot(&mut p, t, i) = orig;
            numeric.push((up - down) / (2.0 * step));
            analytic.push(gv);
        }
    }
    rel_error(analytic.iter(), numeric.iter())
}
