//! Dictionary learning by alternating minimization.
//!
//! Each batch is sparse-coded on its kept pixels only; the code is then held
//! fixed while every atom takes a momentum-SGD step along the Hebbian term
//! `Σ activation × residual patch`, computed over the full image so that the
//! dictionary learns to predict the omitted pixels too. Atoms are projected
//! back to the unit sphere after every step.
//!
//! Images are coded after removing the per-channel mean of their kept pixels,
//! exactly as decompression does (see `inpaint`).

use ndarray::linalg::general_mat_mul;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::geometry::Padding;
use crate::image_io::{Dataset, ImageTensor};
use crate::masking::{checkerboard_mask, mix_seed, random_mask, PixelMask};
use crate::metrics::psnr_capped;
use crate::sparse_coder::{
    energy, inpaint, kept_mean, lca_encode, reconstruct, shift_channels, sparsity, Dictionary, LcaParams,
    SparseCode,
};
use crate::Real;

/// Which pixels the encoder sees during training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskPolicy {
    /// One fixed parity pattern for every image.
    Checkerboard { phase: u8 },
    /// A fresh random mask per training batch, derived from `master_seed`.
    Random { master_seed: u64, keep_fraction: f64 },
}

impl MaskPolicy {
    pub fn random(master_seed: u64) -> Self {
        MaskPolicy::Random {
            master_seed,
            keep_fraction: 0.5,
        }
    }

    /// Mask shared by every image of training batch number `batch`.
    pub fn batch_mask(&self, height: usize, width: usize, batch: u64) -> Result<PixelMask> {
        match *self {
            MaskPolicy::Checkerboard { phase } => Ok(checkerboard_mask(height, width, phase)),
            MaskPolicy::Random {
                master_seed,
                keep_fraction,
            } => random_mask(height, width, keep_fraction, mix_seed(master_seed, batch)),
        }
    }

    /// Per-image mask for evaluation, on a seed stream disjoint from training.
    pub fn eval_mask(&self, height: usize, width: usize, index: u64) -> Result<PixelMask> {
        match *self {
            MaskPolicy::Checkerboard { phase } => Ok(checkerboard_mask(height, width, phase)),
            MaskPolicy::Random {
                master_seed,
                keep_fraction,
            } => random_mask(
                height,
                width,
                keep_fraction,
                mix_seed(master_seed ^ 0xE7A1_0000_0000_0000, index),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub atoms: usize,
    pub patch: (usize, usize),
    pub stride: usize,
    pub padding: Padding,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mask_policy: MaskPolicy,
    pub lca: LcaParams,
    pub init_seed: u64,
}

impl Default for TrainerConfig {
    /// 1024 atoms of 16x16 at stride 2.
    fn default() -> Self {
        Self {
            atoms: 1024,
            patch: (16, 16),
            stride: 2,
            padding: Padding::Same,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 50,
            epochs: 2,
            mask_policy: MaskPolicy::Checkerboard { phase: 0 },
            lca: LcaParams::default(),
            init_seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if self.atoms == 0 {
            return Err(invalid("need at least one atom"));
        }
        self.lca.validate()
    }
}

/// Per-batch training statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    /// Mean masked objective at the inferred codes (before the update).
    pub energy: f64,
    pub sparsity: f64,
    /// Mean PSNR of the full `φ*a` reconstruction against the original.
    pub psnr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub dict: Dictionary<f32>,
    pub momentum_buffer: Array2<f32>,
    pub epoch: usize,
    /// Global batch counter across epochs.
    pub batch: usize,
    pub history: Vec<BatchRecord>,
    /// Atoms reinitialized because they stayed silent for a whole epoch.
    pub dead_atoms_reinitialized: usize,
    rng: ChaCha8Rng,
    active_this_epoch: Vec<bool>,
}

impl TrainState {
    pub fn new(channels: usize, config: &TrainerConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let dict = random_dictionary(&mut rng, config.atoms, config.patch, channels, config.stride, config.padding)?;
        Ok(Self::from_dictionary(dict, rng))
    }

    fn from_dictionary(dict: Dictionary<f32>, rng: ChaCha8Rng) -> Self {
        let momentum_buffer = Array2::zeros(dict.atoms.raw_dim());
        let k = dict.num_atoms();
        Self {
            dict,
            momentum_buffer,
            epoch: 0,
            batch: 0,
            history: Vec::new(),
            dead_atoms_reinitialized: 0,
            rng,
            active_this_epoch: vec![false; k],
        }
    }

    fn reinit_atom(&mut self, k: usize) {
        let mut row = self.dict.atoms.row_mut(k);
        loop {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut self.rng);
            }
            let norm = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if norm > 1e-12 {
                row.mapv_inplace(|v| (v as f64 / norm) as f32);
                break;
            }
        }
        self.momentum_buffer.row_mut(k).fill(0.0);
    }
}

fn random_dictionary(
    rng: &mut ChaCha8Rng,
    k: usize,
    patch: (usize, usize),
    channels: usize,
    stride: usize,
    padding: Padding,
) -> Result<Dictionary<f32>> {
    let len = patch.0 * patch.1 * channels;
    let atoms = Array2::from_shape_simple_fn((k, len), || StandardNormal.sample(rng));
    let mut dict = Dictionary::new(atoms, patch, channels, stride, padding)?;
    dict.normalize();
    Ok(dict)
}

/// `k` random unit-norm atoms drawn from a seeded standard normal.
pub fn init_dictionary(
    k: usize,
    patch: (usize, usize),
    channels: usize,
    stride: usize,
    seed: u64,
) -> Result<Dictionary<f32>> {
    if k == 0 {
        return Err(invalid("need at least one atom"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_dictionary(&mut rng, k, patch, channels, stride, Padding::Same)
}

// Below this density the per-unit loop beats a dense GEMM.
const SPARSE_DENSITY: f64 = 0.08;

/// Hebbian dictionary step, `−∂/∂φ ½‖I − φ*a‖²` over the whole image:
/// for every atom, the activation-weighted sum of residual patches.
pub fn dict_gradient<T: Real>(
    img: &ImageTensor<T>,
    code: &SparseCode<T>,
    dict: &Dictionary<T>,
) -> Result<Array2<T>> {
    let recon = reconstruct(dict, code, (img.height, img.width))?;
    if !recon.same_shape(img) {
        return Err(invalid("image and reconstruction differ in shape"));
    }
    let residual: Vec<T> = img.data.iter().zip(&recon.data).map(|(&a, &b)| a - b).collect();
    let g = dict.geometry(img.height, img.width)?;
    let mut grad = Array2::zeros(dict.atoms.raw_dim());
    let acts = &code.activations;
    let nnz = acts.iter().filter(|&&v| v != T::zero()).count();
    if (nnz as f64) < SPARSE_DENSITY * acts.len() as f64 {
        for (pos, row) in acts.outer_iter().enumerate() {
            for (k, &a) in row.iter().enumerate() {
                if a != T::zero() {
                    let mut gk = grad.row_mut(k);
                    g.accumulate_patch(pos, &residual, a, gk.as_slice_mut().expect("contiguous"));
                }
            }
        }
    } else {
        let cols = g.im2col(&residual);
        general_mat_mul(T::one(), &acts.t(), &cols, T::zero(), &mut grad);
    }
    Ok(grad)
}

/// Momentum SGD step on the atoms followed by projection to unit norm.
pub fn apply_update(state: &mut TrainState, grad: &Array2<f32>, config: &TrainerConfig) -> Result<()> {
    if grad.dim() != state.dict.atoms.dim() {
        return Err(invalid(format!(
            "gradient is {:?}, atoms are {:?}",
            grad.dim(),
            state.dict.atoms.dim()
        )));
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::TrainingDiverged {
            epoch: state.epoch,
            batch: state.batch,
            reason: "non-finite dictionary gradient".into(),
        });
    }
    let momentum = config.momentum as f32;
    let lr = config.learning_rate as f32;
    ndarray::Zip::from(&mut state.momentum_buffer)
        .and(&mut state.dict.atoms)
        .and(grad)
        .for_each(|m, w, &g| {
            *m = momentum * *m + g;
            *w += lr * *m;
        });
    for k in state.dict.normalize() {
        state.reinit_atom(k);
    }
    Ok(())
}

/// Per-image statistics returned alongside a gradient.
struct ImageStep {
    grad: Array2<f32>,
    energy: f64,
    sparsity: f64,
    psnr: f64,
    active: Vec<bool>,
}

// Coded on the kept-pixel mean-removed image, as in `inpaint`.
fn image_step(img: &ImageTensor<f32>, mask: &PixelMask, dict: &Dictionary<f32>, lca: &LcaParams) -> Result<ImageStep> {
    let mean = kept_mean(img, mask)?;
    let centered = shift_channels(img, &mean.iter().map(|&m| -m).collect::<Vec<_>>());
    let code = lca_encode(&centered, mask, dict, lca)?;
    let e = energy(&centered, mask, dict, &code, lca.lambda)?;
    let recon = shift_channels(&reconstruct(dict, &code, (img.height, img.width))?, &mean);
    let psnr = psnr_capped(img, &recon.clamped(), 1.0)?;
    let mut active = vec![false; dict.num_atoms()];
    for row in code.activations.outer_iter() {
        for (k, &a) in row.iter().enumerate() {
            active[k] |= a > 0.0;
        }
    }
    Ok(ImageStep {
        grad: dict_gradient(&centered, &code, dict)?,
        energy: e,
        sparsity: sparsity(&code),
        psnr,
        active,
    })
}

/// Run one pass over `images` (in the given order) in batches.
pub fn train_epoch(
    state: &mut TrainState,
    dataset: &Dataset,
    config: &TrainerConfig,
    mut on_batch: impl FnMut(&BatchRecord),
) -> Result<()> {
    let first = dataset
        .images
        .first()
        .ok_or_else(|| invalid("dataset is empty"))?;
    let (h, w) = (first.height, first.width);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.init_seed, state.epoch as u64)));

    for (batch_in_epoch, chunk) in order.chunks(config.batch_size).enumerate() {
        let mask = config.mask_policy.batch_mask(h, w, state.batch as u64)?;
        let dict = &state.dict;
        let steps: Vec<ImageStep> = chunk
            .par_iter()
            .map(|&i| image_step(&dataset.images[i], &mask, dict, &config.lca))
            .collect::<Result<_>>()
            .map_err(|e| Error::TrainingDiverged {
                epoch: state.epoch,
                batch: batch_in_epoch,
                reason: e.to_string(),
            })?;

        // fixed-order reduction keeps training bit-reproducible
        let n = steps.len() as f32;
        let mut grad = Array2::<f32>::zeros(state.dict.atoms.raw_dim());
        let (mut e, mut s, mut p) = (0.0, 0.0, 0.0);
        for step in &steps {
            grad.zip_mut_with(&step.grad, |g, &x| *g += x);
            e += step.energy;
            s += step.sparsity;
            p += step.psnr;
            for (seen, &a) in state.active_this_epoch.iter_mut().zip(&step.active) {
                *seen |= a;
            }
        }
        grad.mapv_inplace(|g| g / n);
        let record = BatchRecord {
            epoch: state.epoch,
            batch: batch_in_epoch,
            energy: e / n as f64,
            sparsity: s / n as f64,
            psnr: p / n as f64,
        };

        apply_update(state, &grad, config).map_err(|e| match e {
            Error::TrainingDiverged { reason, .. } => Error::TrainingDiverged {
                epoch: record.epoch,
                batch: record.batch,
                reason,
            },
            other => other,
        })?;
        state.history.push(record);
        on_batch(&record);
        state.batch += 1;
    }

    let dead: Vec<usize> = (0..state.dict.num_atoms())
        .filter(|&k| !state.active_this_epoch[k])
        .collect();
    // a dictionary that never fired at all is left alone: that is a λ problem
    if dead.len() < state.dict.num_atoms() {
        for &k in &dead {
            state.reinit_atom(k);
        }
        state.dead_atoms_reinitialized += dead.len();
    }
    state.active_this_epoch.fill(false);
    state.epoch += 1;
    Ok(())
}

/// Learn a dictionary from `dataset` for `config.epochs` epochs.
pub fn train_dictionary(dataset: &Dataset, config: &TrainerConfig) -> Result<TrainState> {
    train_dictionary_with(dataset, config, |_| {})
}

pub fn train_dictionary_with(
    dataset: &Dataset,
    config: &TrainerConfig,
    mut on_batch: impl FnMut(&BatchRecord),
) -> Result<TrainState> {
    config.validate()?;
    let first = dataset
        .images
        .first()
        .ok_or_else(|| invalid("dataset is empty"))?;
    let mut state = TrainState::new(first.channels, config)?;
    for _ in 0..config.epochs {
        train_epoch(&mut state, dataset, config, &mut on_batch)?;
    }
    Ok(state)
}

/// Mean sparsity and mean inpainting PSNR of a dictionary on held-out images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoldoutScore {
    pub mean_sparsity: f64,
    pub mean_psnr: f64,
}

pub fn evaluate_holdout(
    dict: &Dictionary<f32>,
    holdout: &Dataset,
    policy: &MaskPolicy,
    lca: &LcaParams,
) -> Result<HoldoutScore> {
    if holdout.is_empty() {
        return Err(invalid("holdout set is empty"));
    }
    let scores: Vec<(f64, f64)> = holdout
        .images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let mask = policy.eval_mask(img.height, img.width, i as u64)?;
            let (recon, code) = inpaint(img, &mask, dict, lca, true)?;
            Ok((sparsity(&code), psnr_capped(img, &recon.clamped(), 1.0)?))
        })
        .collect::<Result<_>>()?;
    let n = scores.len() as f64;
    Ok(HoldoutScore {
        mean_sparsity: scores.iter().map(|s| s.0).sum::<f64>() / n,
        mean_psnr: scores.iter().map(|s| s.1).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub mean_sparsity: f64,
    pub mean_psnr: f64,
}

/// Train one epoch per λ from the same initial seed, then score each
/// dictionary on `holdout`. Rows are sorted by λ.
pub fn sweep_lambda(
    train: &Dataset,
    holdout: &Dataset,
    lambdas: &[f64],
    config: &TrainerConfig,
) -> Result<Vec<SweepRow>> {
    if lambdas.len() < 2 {
        return Err(invalid("a sweep needs at least two lambda values"));
    }
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    sorted
        .iter()
        .map(|&lambda| {
            let mut cfg = config.clone();
            cfg.lca.lambda = lambda;
            cfg.epochs = 1;
            let state = train_dictionary(train, &cfg)?;
            let score = evaluate_holdout(&state.dict, holdout, &cfg.mask_policy, &cfg.lca)?;
            Ok(SweepRow {
                lambda,
                mean_sparsity: score.mean_sparsity,
                mean_psnr: score.mean_psnr,
            })
        })
        .collect()
}
