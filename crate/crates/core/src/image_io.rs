//! Image tensors and CIFAR-10 binary ingestion.
//!
//! Pixels are stored interleaved and row-major: the value for row `r`,
//! column `c`, channel `ch` lives at `(r * width + c) * channels + ch`.
//! CIFAR-10 stores each record channel-planar (all R, then G, then B); the
//! loader converts to the interleaved layout.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{invalid, Error, Result};
use crate::Real;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_PIXEL_BYTES: usize = CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS;
pub const CIFAR_RECORD_BYTES: usize = 1 + CIFAR_PIXEL_BYTES;

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILES: [&str; 1] = ["test_batch.bin"];

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T = f32> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T> ImageTensor<T> {
    pub fn same_shape<U>(&self, other: &ImageTensor<U>) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

impl<T: Real> ImageTensor<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::zero())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(invalid(format!(
                "{} values cannot fill a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Build an image from bytes in interleaved layout, mapping `b` to `b / 255`.
    pub fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_vec(
            height,
            width,
            channels,
            bytes.iter().map(|&b| byte_to_intensity(b)).collect(),
        )
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> T {
        self.data[self.index(row, col, ch)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn cast<U: Real>(&self) -> ImageTensor<U> {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn clamped(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = v.max(T::zero()).min(T::one());
        }
        out
    }

    /// Quantize every intensity to a byte, `round(v * 255)` with ties away
    /// from zero. Out-of-range values are clamped and counted.
    pub fn to_bytes(&self) -> QuantizedBytes {
        let mut clamped = 0;
        let bytes = self
            .data
            .iter()
            .map(|&v| {
                let (b, was_clamped) = intensity_to_byte(v);
                clamped += was_clamped as usize;
                b
            })
            .collect();
        QuantizedBytes { bytes, clamped }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedBytes {
    pub bytes: Vec<u8>,
    /// Number of values that fell outside [0, 1] (or were NaN) and were clamped.
    pub clamped: usize,
}

#[inline]
pub fn byte_to_intensity<T: Real>(b: u8) -> T {
    T::lit(b as f64 / 255.0)
}

#[inline]
pub fn intensity_to_byte<T: Real>(v: T) -> (u8, bool) {
    let x = v.as_f64();
    if x.is_nan() {
        return (0, true);
    }
    let clamped = !(0.0..=1.0).contains(&x);
    let scaled = (x.clamp(0.0, 1.0) * 255.0).round();
    (scaled as u8, clamped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn files(self) -> &'static [&'static str] {
        match self {
            Split::Train => &TRAIN_FILES,
            Split::Test => &TEST_FILES,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// An ordered, immutable collection of images with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageTensor<f32>>,
    pub labels: Option<Vec<u8>>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<ImageTensor<f32>>, split: Split) -> Self {
        Self {
            images,
            labels: None,
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Images `start..start+count` (clipped to the dataset length).
    pub fn slice(&self, start: usize, count: usize) -> Dataset {
        let end = (start + count).min(self.len());
        let start = start.min(end);
        Dataset {
            images: self.images[start..end].to_vec(),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
            split: self.split,
        }
    }
}

/// Load every record of a CIFAR-10 split from the binary-version directory.
pub fn load_cifar10(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    load_cifar10_limited(dir, split, usize::MAX)
}

/// Load at most `max_images` records of a split, in file order.
pub fn load_cifar10_limited(dir: impl AsRef<Path>, split: Split, max_images: usize) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in split.files() {
        if images.len() >= max_images {
            break;
        }
        let path = dir.join(name);
        let bytes = read_dataset_file(&path)?;
        if bytes.len() % CIFAR_RECORD_BYTES != 0 {
            let offset = (bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES) as u64;
            return Err(Error::CorruptDataset { path, offset });
        }
        for record in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
            if images.len() >= max_images {
                break;
            }
            labels.push(record[0]);
            images.push(decode_record(&record[1..]));
        }
    }
    Ok(Dataset {
        images,
        labels: Some(labels),
        split,
    })
}

fn read_dataset_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::DatasetNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

/// Convert one planar 32x32 RGB record body to an interleaved image.
pub fn decode_record(planar: &[u8]) -> ImageTensor<f32> {
    debug_assert_eq!(planar.len(), CIFAR_PIXEL_BYTES);
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut data = Vec::with_capacity(CIFAR_PIXEL_BYTES);
    for p in 0..plane {
        for ch in 0..CIFAR_CHANNELS {
            data.push(byte_to_intensity(planar[ch * plane + p]));
        }
    }
    ImageTensor {
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
        channels: CIFAR_CHANNELS,
        data,
    }
}

/// Inverse of [`decode_record`]: interleaved image to planar record body.
pub fn encode_record<T: Real>(img: &ImageTensor<T>) -> Result<Vec<u8>> {
    if img.dims() != (CIFAR_SIDE, CIFAR_SIDE, CIFAR_CHANNELS) {
        return Err(invalid(format!(
            "CIFAR records are 32x32x3, got {:?}",
            img.dims()
        )));
    }
    let bytes = img.to_bytes().bytes;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut planar = vec![0u8; CIFAR_PIXEL_BYTES];
    for p in 0..plane {
        for ch in 0..CIFAR_CHANNELS {
            planar[ch * plane + p] = bytes[p * CIFAR_CHANNELS + ch];
        }
    }
    Ok(planar)
}

/// Write labelled 32x32x3 images as one CIFAR-10 binary batch file.
pub fn write_cifar10_file<T: Real>(
    path: impl AsRef<Path>,
    images: &[ImageTensor<T>],
    labels: &[u8],
) -> Result<()> {
    if images.len() != labels.len() {
        return Err(invalid("images and labels differ in length"));
    }
    let mut out = Vec::with_capacity(images.len() * CIFAR_RECORD_BYTES);
    for (img, &label) in images.iter().zip(labels) {
        out.push(label);
        out.extend(encode_record(img)?);
    }
    let mut file = fs::File::create(path.as_ref())?;
    file.write_all(&out)?;
    Ok(())
}

/// Standard file names of a CIFAR-10 split, relative to the dataset directory.
pub fn split_files(dir: impl AsRef<Path>, split: Split) -> Vec<PathBuf> {
    split.files().iter().map(|f| dir.as_ref().join(f)).collect()
}
