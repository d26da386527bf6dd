//! Bottleneck autoencoder baseline.
//!
//! ```text
//! code  = ReLU(conv_stride(W, x) + b)
//! x_rec = ReLU(W' · code + b')
//! loss  = ‖x − x_rec‖²
//! ```
//!
//! The encoder is a single strided convolution; the decoder a single dense
//! layer. With `tied_weights` the decoder is instead the transposed encoder
//! convolution (sharing `W`) plus its own bias.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::geometry::{Padding, PatchGeometry};
use crate::image_io::{Dataset, ImageTensor};
use crate::masking::mix_seed;
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct AeConfig {
    /// `(height, width, channels)` of the images.
    pub image: (usize, usize, usize),
    pub kernel: (usize, usize),
    pub stride: usize,
    pub out_channels: usize,
    pub tied_weights: bool,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub init_seed: u64,
}

impl Default for AeConfig {
    /// 8x8 kernels at stride 4 with 24 maps: 8·8·24 = 1536 code values for a
    /// 32x32x3 thumbnail, exactly half of its 3072 inputs.
    fn default() -> Self {
        Self {
            image: (32, 32, 3),
            kernel: (8, 8),
            stride: 4,
            out_channels: 24,
            tied_weights: false,
            learning_rate: 0.005,
            momentum: 0.9,
            batch_size: 50,
            epochs: 2,
            init_seed: 0,
        }
    }
}

impl AeConfig {
    /// Variant whose bottleneck holds a quarter of the input values (768 for
    /// CIFAR thumbnails) instead of half.
    pub fn quarter_bottleneck() -> Self {
        Self {
            out_channels: 12,
            ..Self::default()
        }
    }

    pub fn geometry(&self) -> Result<PatchGeometry> {
        PatchGeometry::new(self.image, self.kernel, self.stride, Padding::Same)
    }

    pub fn code_size(&self) -> Result<usize> {
        Ok(self.geometry()?.positions() * self.out_channels)
    }

    pub fn input_size(&self) -> usize {
        self.image.0 * self.image.1 * self.image.2
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        if self.out_channels == 0 {
            return Err(invalid("out_channels must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderParams<T = f32> {
    pub geometry: PatchGeometry,
    /// Encoder kernels, `out_channels x (kh * kw * channels)`.
    pub enc_w: Array2<T>,
    pub enc_b: Array1<T>,
    /// Decoder matrix, `input_size x code_size`; `None` with tied weights.
    pub dec_w: Option<Array2<T>>,
    pub dec_b: Array1<T>,
}

/// Gradients (or momentum buffers) with the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AeGradients<T = f32> {
    pub enc_w: Array2<T>,
    pub enc_b: Array1<T>,
    pub dec_w: Option<Array2<T>>,
    pub dec_b: Array1<T>,
}

impl<T: Real> AutoencoderParams<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: &AeConfig) -> Result<Self> {
        config.validate()?;
        let geometry = config.geometry()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let d = geometry.patch_len();
        let kk = config.kernel.0 * config.kernel.1;
        let s_enc = (6.0 / (d + kk * config.out_channels) as f64).sqrt();
        let enc_w = Array2::from_shape_simple_fn((config.out_channels, d), || {
            T::lit(rng.random_range(-s_enc..s_enc))
        });
        let code = geometry.positions() * config.out_channels;
        let input = geometry.image_len();
        let dec_w = (!config.tied_weights).then(|| {
            let s_dec = (6.0 / (code + input) as f64).sqrt();
            Array2::from_shape_simple_fn((input, code), || T::lit(rng.random_range(-s_dec..s_dec)))
        });
        Ok(Self {
            geometry,
            enc_w,
            enc_b: Array1::zeros(config.out_channels),
            dec_w,
            dec_b: Array1::zeros(input),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.enc_w.nrows()
    }

    pub fn code_size(&self) -> usize {
        self.geometry.positions() * self.out_channels()
    }

    pub fn input_size(&self) -> usize {
        self.geometry.image_len()
    }

    pub fn is_tied(&self) -> bool {
        self.dec_w.is_none()
    }

    pub fn zeros_like(&self) -> AeGradients<T> {
        AeGradients {
            enc_w: Array2::zeros(self.enc_w.raw_dim()),
            enc_b: Array1::zeros(self.enc_b.len()),
            dec_w: self.dec_w.as_ref().map(|w| Array2::zeros(w.raw_dim())),
            dec_b: Array1::zeros(self.dec_b.len()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.enc_w.iter().all(|v| v.is_finite())
            && self.enc_b.iter().all(|v| v.is_finite())
            && self.dec_w.iter().flatten().all(|v| v.is_finite())
            && self.dec_b.iter().all(|v| v.is_finite())
    }

    fn check_input(&self, x: &ImageTensor<T>) -> Result<()> {
        let g = &self.geometry;
        if x.dims() != (g.image_h, g.image_w, g.channels) {
            return Err(invalid(format!(
                "autoencoder expects {}x{}x{} images, got {:?}",
                g.image_h,
                g.image_w,
                g.channels,
                x.dims()
            )));
        }
        Ok(())
    }

    /// Encoder pre-activations for a stack of images, `(B * positions) x out_channels`.
    fn encoder_pre(&self, cols: &Array2<T>) -> Array2<T> {
        let mut pre = cols.dot(&self.enc_w.t());
        pre += &self.enc_b;
        pre
    }

    /// Decoder pre-activations, `B x input_size`, from codes `B x code_size`.
    fn decoder_pre(&self, codes: &Array2<T>) -> Array2<T> {
        let b = codes.nrows();
        let mut z = match &self.dec_w {
            Some(w) => codes.dot(&w.t()),
            None => {
                let g = &self.geometry;
                let per_pos = codes
                    .view()
                    .into_shape_with_order((b * g.positions(), self.out_channels()))
                    .expect("contiguous codes");
                let patches = per_pos.dot(&self.enc_w);
                let mut out = Array2::zeros((b, g.image_len()));
                for (i, mut row) in out.outer_iter_mut().enumerate() {
                    let span = patches.slice(ndarray::s![i * g.positions()..(i + 1) * g.positions(), ..]);
                    g.col2im_add(span, row.as_slice_mut().expect("contiguous"));
                }
                out
            }
        };
        z += &self.dec_b;
        z
    }

    fn stack_cols(&self, xs: &[&ImageTensor<T>]) -> Array2<T> {
        let g = &self.geometry;
        let p = g.positions();
        let mut cols = Array2::zeros((xs.len() * p, g.patch_len()));
        for (i, x) in xs.iter().enumerate() {
            let block = g.im2col(&x.data);
            cols.slice_mut(ndarray::s![i * p..(i + 1) * p, ..]).assign(&block);
        }
        cols
    }

    /// Sum of losses over `xs` and the summed gradients.
    pub fn batch_backward(&self, xs: &[&ImageTensor<T>]) -> Result<(f64, AeGradients<T>)> {
        for x in xs {
            self.check_input(x)?;
        }
        let g = &self.geometry;
        let b = xs.len();
        let p = g.positions();
        let oc = self.out_channels();
        let n = g.image_len();
        let relu = |v: T| v.max(T::zero());

        let cols = self.stack_cols(xs);
        let pre = self.encoder_pre(&cols);
        let code_pp = pre.mapv(relu);
        let codes = code_pp
            .view()
            .into_shape_with_order((b, p * oc))
            .expect("contiguous")
            .to_owned();
        let z = self.decoder_pre(&codes);

        let mut loss = 0.0;
        let mut dz = Array2::<T>::zeros((b, n));
        for (i, x) in xs.iter().enumerate() {
            for j in 0..n {
                let zz = z[[i, j]];
                let diff = relu(zz) - x.data[j];
                loss += diff.as_f64() * diff.as_f64();
                if zz > T::zero() {
                    dz[[i, j]] = T::lit(2.0) * diff;
                }
            }
        }

        let mut grads = self.zeros_like();
        grads.dec_b = dz.sum_axis(Axis(0));
        let dcode_pp = match &self.dec_w {
            Some(w) => {
                let gw = grads.dec_w.as_mut().expect("untied gradients");
                general_mat_mul(T::one(), &dz.t(), &codes, T::zero(), gw);
                dz.dot(w)
                    .into_shape_with_order((b * p, oc))
                    .expect("contiguous")
            }
            None => {
                let mut dcols = Array2::zeros((b * p, g.patch_len()));
                for i in 0..b {
                    let block = g.im2col(dz.row(i).as_slice().expect("contiguous"));
                    dcols.slice_mut(ndarray::s![i * p..(i + 1) * p, ..]).assign(&block);
                }
                general_mat_mul(T::one(), &code_pp.t(), &dcols, T::zero(), &mut grads.enc_w);
                dcols.dot(&self.enc_w.t())
            }
        };
        let mut dpre = dcode_pp;
        ndarray::Zip::from(&mut dpre).and(&pre).for_each(|d, &p| {
            if p <= T::zero() {
                *d = T::zero();
            }
        });
        grads.enc_b = dpre.sum_axis(Axis(0));
        general_mat_mul(T::one(), &dpre.t(), &cols, T::one(), &mut grads.enc_w);
        Ok((loss, grads))
    }
}

/// Bottleneck code and reconstruction of one image.
pub fn ae_forward<T: Real>(params: &AutoencoderParams<T>, x: &ImageTensor<T>) -> Result<(Vec<T>, ImageTensor<T>)> {
    let code = ae_compress(params, x)?;
    let rec = ae_decompress(params, &code)?;
    Ok((code, rec))
}

/// `‖x − x_rec‖²` (no ½ factor).
pub fn ae_loss<T: Real>(params: &AutoencoderParams<T>, x: &ImageTensor<T>) -> Result<f64> {
    let (_, rec) = ae_forward(params, x)?;
    Ok(x.data
        .iter()
        .zip(&rec.data)
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum())
}

/// Exact gradient of [`ae_loss`]; the ReLU derivative at 0 is taken as 0.
pub fn ae_backward<T: Real>(params: &AutoencoderParams<T>, x: &ImageTensor<T>) -> Result<AeGradients<T>> {
    params.batch_backward(&[x]).map(|(_, g)| g)
}

/// The bottleneck code, `ReLU(conv(W, x) + b)`, position-major then channel.
pub fn ae_compress<T: Real>(params: &AutoencoderParams<T>, x: &ImageTensor<T>) -> Result<Vec<T>> {
    params.check_input(x)?;
    let cols = params.geometry.im2col(&x.data);
    Ok(params
        .encoder_pre(&cols)
        .iter()
        .map(|&v| v.max(T::zero()))
        .collect())
}

/// Decoder half only: `ReLU(W' · code + b')`.
pub fn ae_decompress<T: Real>(params: &AutoencoderParams<T>, code: &[T]) -> Result<ImageTensor<T>> {
    if code.len() != params.code_size() {
        return Err(invalid(format!(
            "code has {} values, model expects {}",
            code.len(),
            params.code_size()
        )));
    }
    let codes = Array2::from_shape_vec((1, code.len()), code.to_vec()).expect("shape checked");
    let z = params.decoder_pre(&codes);
    let g = &params.geometry;
    ImageTensor::from_vec(
        g.image_h,
        g.image_w,
        g.channels,
        z.iter().map(|&v| v.max(T::zero())).collect(),
    )
}

#[derive(Debug, Clone)]
pub struct AeTrainState {
    pub params: AutoencoderParams<f32>,
    pub velocity: AeGradients<f32>,
    /// Mean per-image loss of every batch, in training order.
    pub history: Vec<f64>,
    pub epoch: usize,
}

impl AeTrainState {
    pub fn new(config: &AeConfig) -> Result<Self> {
        let params = AutoencoderParams::init(config)?;
        let velocity = params.zeros_like();
        Ok(Self {
            params,
            velocity,
            history: Vec::new(),
            epoch: 0,
        })
    }

    /// `v ← μ v + g; θ ← θ − lr v`, with `g` the batch-mean gradient.
    pub fn step(&mut self, grads: &AeGradients<f32>, lr: f32, momentum: f32) {
        fn upd<D: ndarray::Dimension>(
            theta: &mut ndarray::Array<f32, D>,
            vel: &mut ndarray::Array<f32, D>,
            g: &ndarray::Array<f32, D>,
            lr: f32,
            mu: f32,
        ) {
            ndarray::Zip::from(theta).and(vel).and(g).for_each(|t, v, &g| {
                *v = mu * *v + g;
                *t -= lr * *v;
            });
        }
        let p = &mut self.params;
        let v = &mut self.velocity;
        upd(&mut p.enc_w, &mut v.enc_w, &grads.enc_w, lr, momentum);
        upd(&mut p.enc_b, &mut v.enc_b, &grads.enc_b, lr, momentum);
        if let (Some(w), Some(vw), Some(gw)) = (p.dec_w.as_mut(), v.dec_w.as_mut(), grads.dec_w.as_ref()) {
            upd(w, vw, gw, lr, momentum);
        }
        upd(&mut p.dec_b, &mut v.dec_b, &grads.dec_b, lr, momentum);
    }
}

pub fn train_autoencoder(dataset: &Dataset, config: &AeConfig) -> Result<AeTrainState> {
    train_autoencoder_with(dataset, config, |_, _, _| {})
}

/// Minibatch SGD with momentum; `on_batch(epoch, batch, mean_loss)` after each step.
pub fn train_autoencoder_with(
    dataset: &Dataset,
    config: &AeConfig,
    mut on_batch: impl FnMut(usize, usize, f64),
) -> Result<AeTrainState> {
    if dataset.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    let mut state = AeTrainState::new(config)?;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.init_seed, epoch as u64)));
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let xs: Vec<&ImageTensor<f32>> = chunk.iter().map(|&i| &dataset.images[i]).collect();
            let (loss, mut grads) = state.params.batch_backward(&xs)?;
            let n = xs.len() as f32;
            let mean_loss = loss / xs.len() as f64;
            if !mean_loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    batch,
                    reason: "non-finite autoencoder loss".into(),
                });
            }
            scale_grads(&mut grads, 1.0 / n);
            state.step(&grads, config.learning_rate as f32, config.momentum as f32);
            if !state.params.all_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    batch,
                    reason: "non-finite autoencoder parameters".into(),
                });
            }
            state.history.push(mean_loss);
            on_batch(epoch, batch, mean_loss);
        }
        state.epoch += 1;
    }
    Ok(state)
}

fn scale_grads(g: &mut AeGradients<f32>, s: f32) {
    g.enc_w.mapv_inplace(|v| v * s);
    g.enc_b.mapv_inplace(|v| v * s);
    if let Some(w) = g.dec_w.as_mut() {
        w.mapv_inplace(|v| v * s);
    }
    g.dec_b.mapv_inplace(|v| v * s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(tied: bool, seed: u64) -> AeConfig {
        AeConfig {
            image: (4, 4, 1),
            kernel: (2, 2),
            stride: 2,
            out_channels: 2,
            tied_weights: tied,
            init_seed: seed,
            ..AeConfig::default()
        }
    }

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_vec(h, w, c, (0..h * w * c).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn default_bottleneck_is_half_the_input() {
        let cfg = AeConfig::default();
        assert_eq!(cfg.code_size().unwrap(), 1536);
        assert_eq!(cfg.input_size(), 3072);
        assert_eq!(AeConfig::quarter_bottleneck().code_size().unwrap(), 768);
        let p = AutoencoderParams::<f32>::init(&cfg).unwrap();
        let x = ImageTensor::filled(32, 32, 3, 0.5);
        let (code, rec) = ae_forward(&p, &x).unwrap();
        assert_eq!(code.len(), 1536);
        assert!(code.iter().all(|&v| v >= 0.0));
        assert_eq!(rec.dims(), (32, 32, 3));
    }

    #[test]
    fn zero_params_reconstruct_zero() {
        let mut p = AutoencoderParams::<f64>::init(&tiny(false, 0)).unwrap();
        p.enc_w.fill(0.0);
        p.dec_w.as_mut().unwrap().fill(0.0);
        let x = random_image(4, 4, 1, 1);
        let (_, rec) = ae_forward(&p, &x).unwrap();
        assert!(rec.data.iter().all(|&v| v == 0.0));
        let want: f64 = x.data.iter().map(|v| v * v).sum();
        assert!((ae_loss(&p, &x).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn negative_preactivations_are_cut() {
        let mut p = AutoencoderParams::<f64>::init(&tiny(false, 0)).unwrap();
        p.enc_b.fill(-100.0);
        p.dec_b.fill(-1.0);
        let x = random_image(4, 4, 1, 2);
        let (code, rec) = ae_forward(&p, &x).unwrap();
        assert!(code.iter().all(|&v| v == 0.0));
        assert!(rec.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_input_zero_bias_has_zero_gradient() {
        for tied in [false, true] {
            let p = AutoencoderParams::<f64>::init(&tiny(tied, 3)).unwrap();
            let g = ae_backward(&p, &ImageTensor::zeros(4, 4, 1)).unwrap();
            assert!(g.enc_w.iter().chain(g.enc_b.iter()).chain(g.dec_b.iter()).all(|&v| v == 0.0));
            assert!(g.dec_w.iter().flatten().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn decoder_bias_gradient_by_hand() {
        // 1x2x1 image, 1x1 kernel at stride 1, one map: two code units,
        // each output j depends on code via W'. Choose W' = 0 so x_rec = ReLU(b').
        let cfg = AeConfig {
            image: (1, 2, 1),
            kernel: (1, 1),
            stride: 1,
            out_channels: 1,
            ..AeConfig::default()
        };
        let mut p = AutoencoderParams::<f64>::init(&cfg).unwrap();
        p.dec_w.as_mut().unwrap().fill(0.0);
        p.dec_b = Array1::from(vec![0.7, -0.2]);
        let x = ImageTensor::from_vec(1, 2, 1, vec![0.5, 0.4]).unwrap();
        let g = ae_backward(&p, &x).unwrap();
        // output 0 active: 2 (0.7 - 0.5) = 0.4; output 1 clipped: 0
        assert!((g.dec_b[0] - 0.4).abs() < 1e-12);
        assert_eq!(g.dec_b[1], 0.0);
    }

    #[test]
    fn compress_decompress_matches_forward() {
        let p = AutoencoderParams::<f32>::init(&AeConfig::default()).unwrap();
        let x = random_image(32, 32, 3, 5).cast::<f32>();
        let (_, rec) = ae_forward(&p, &x).unwrap();
        let code = ae_compress(&p, &x).unwrap();
        assert_eq!(ae_decompress(&p, &code).unwrap(), rec);
        assert!(ae_decompress(&p, &code[1..]).is_err());
        let zero = ae_decompress(&p, &vec![0.0; 1536]).unwrap();
        assert!(zero.data.iter().zip(p.dec_b.iter()).all(|(&r, &b)| r == b.max(0.0)));
    }

    #[test]
    fn batch_gradient_is_sum_of_singles() {
        for tied in [false, true] {
            let p = AutoencoderParams::<f64>::init(&tiny(tied, 7)).unwrap();
            let a = random_image(4, 4, 1, 8);
            let b = random_image(4, 4, 1, 9);
            let (_, gab) = p.batch_backward(&[&a, &b]).unwrap();
            let ga = ae_backward(&p, &a).unwrap();
            let gb = ae_backward(&p, &b).unwrap();
            for (s, (x, y)) in gab.enc_w.iter().zip(ga.enc_w.iter().zip(gb.enc_w.iter())) {
                assert!((s - x - y).abs() < 1e-12);
            }
            for (s, (x, y)) in gab.dec_b.iter().zip(ga.dec_b.iter().zip(gb.dec_b.iter())) {
                assert!((s - x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_shape_rejected() {
        let p = AutoencoderParams::<f64>::init(&tiny(false, 0)).unwrap();
        assert!(ae_forward(&p, &ImageTensor::zeros(4, 4, 3)).is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let data = Dataset::new(vec![ImageTensor::filled(4, 4, 1, 0.5)], crate::Split::Train);
        let cfg = AeConfig { epochs: 0, ..tiny(false, 4) };
        let s = train_autoencoder(&data, &cfg).unwrap();
        assert_eq!(s.params, AutoencoderParams::init(&cfg).unwrap());
    }
}
