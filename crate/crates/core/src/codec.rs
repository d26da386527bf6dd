//! On-disk formats. All integers and floats are little-endian.
//!
//! Compressed image (`.sci`):
//!
//! ```text
//! "SCIM" | version u8 | height u16 | width u16 | channels u8 | mask descriptor | payload
//! mask descriptor: 0x00 phase u8                      (checkerboard)
//!                  0x01 seed u64 | keep_count u32     (random)
//! payload: one byte per channel of every kept pixel, kept pixels in row-major order
//! ```
//!
//! Dictionary (`.scd`):
//!
//! ```text
//! "SCDI" | version u8 | atoms u32 | patch_h u16 | patch_w u16 | channels u8 | stride u16
//!        | padding u8 | lambda f32 | atoms x (patch_h * patch_w * channels) f32
//! ```
//!
//! Autoencoder checkpoint (`.sca`):
//!
//! ```text
//! "SCAE" | version u8 | height u16 | width u16 | channels u8 | kernel_h u8 | kernel_w u8
//!        | stride u8 | out_channels u16 | tied u8 | tensor count u8
//!        | per tensor: rank u8, dims u32 x rank | tensor data f32 in table order
//! ```
//!
//! Tensor interchange (`.sct`), one image per file, plus `manifest.csv`
//! (`filename,label,method`) in the same directory:
//!
//! ```text
//! "SCTN" | version u8 | dtype u8 (0 = f32) | rank u8 (3) | height u32 | width u32 | channels u32 | f32 data
//! ```

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use crate::autoencoder::{AeConfig, AutoencoderParams};
use crate::error::{invalid, Error, Result};
use crate::geometry::Padding;
use crate::image_io::{byte_to_intensity, ImageTensor};
use crate::masking::{checkerboard_mask, random_mask, random_mask_with_count, MaskKind, PixelMask};
use crate::sparse_coder::{inpaint, Dictionary, LcaParams};

pub const IMAGE_MAGIC: &[u8; 4] = b"SCIM";
pub const DICT_MAGIC: &[u8; 4] = b"SCDI";
pub const AE_MAGIC: &[u8; 4] = b"SCAE";
pub const TENSOR_MAGIC: &[u8; 4] = b"SCTN";
pub const FORMAT_VERSION: u8 = 1;

const TAG_CHECKERBOARD: u8 = 0;
const TAG_RANDOM: u8 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptFile(format!(
                "{} truncated at byte {} (needed {n} more)",
                self.what, self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::CorruptFile(format!("{}: bad magic", self.what)));
        }
        let version = self.u8()?;
        if version != FORMAT_VERSION {
            return Err(Error::CorruptFile(format!(
                "{}: unsupported version {version}",
                self.what
            )));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::CorruptFile("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::CorruptFile(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_f32s<'a>(out: &mut Vec<u8>, vals: impl IntoIterator<Item = &'a f32>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn narrow<T: TryFrom<usize>>(v: usize, what: &str) -> Result<T> {
    T::try_from(v).map_err(|_| invalid(format!("{what} = {v} does not fit the file format")))
}

/// How `compress` chooses the kept pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskSpec {
    Checkerboard { phase: u8 },
    Random { seed: u64, keep_fraction: f64 },
}

impl MaskSpec {
    pub fn build(&self, height: usize, width: usize) -> Result<PixelMask> {
        match *self {
            MaskSpec::Checkerboard { phase } => Ok(checkerboard_mask(height, width, phase)),
            MaskSpec::Random { seed, keep_fraction } => random_mask(height, width, keep_fraction, seed),
        }
    }
}

/// A 2:1-style compressed image: header, mask descriptor and kept pixel bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub mask: MaskKind,
    pub payload: Vec<u8>,
}

impl CompressedImage {
    /// Regenerate the pixel mask from the descriptor.
    pub fn pixel_mask(&self) -> Result<PixelMask> {
        match self.mask {
            MaskKind::Checkerboard { phase } => Ok(checkerboard_mask(self.height, self.width, phase)),
            MaskKind::Random { seed, keep_count } => {
                random_mask_with_count(self.height, self.width, keep_count as usize, seed)
            }
            MaskKind::Explicit => Err(invalid("explicit masks cannot be stored")),
        }
    }

    pub fn header_len(&self) -> usize {
        10 + match self.mask {
            MaskKind::Random { .. } => 13,
            _ => 2,
        }
    }

    pub fn raw_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Payload bytes over raw image bytes.
    pub fn payload_ratio(&self) -> f64 {
        self.payload.len() as f64 / self.raw_len() as f64
    }

    /// Whole file (header included) over raw image bytes.
    pub fn file_ratio(&self) -> f64 {
        (self.header_len() + self.payload.len()) as f64 / self.raw_len() as f64
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.header_len() + self.payload.len());
        out.extend_from_slice(IMAGE_MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&narrow::<u16>(self.height, "height")?.to_le_bytes());
        out.extend_from_slice(&narrow::<u16>(self.width, "width")?.to_le_bytes());
        out.push(narrow::<u8>(self.channels, "channels")?);
        match self.mask {
            MaskKind::Checkerboard { phase } => {
                out.push(TAG_CHECKERBOARD);
                out.push(phase);
            }
            MaskKind::Random { seed, keep_count } => {
                out.push(TAG_RANDOM);
                out.extend_from_slice(&seed.to_le_bytes());
                out.extend_from_slice(&keep_count.to_le_bytes());
            }
            MaskKind::Explicit => return Err(invalid("explicit masks cannot be stored")),
        }
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "compressed image");
        r.magic(IMAGE_MAGIC)?;
        let height = r.u16()? as usize;
        let width = r.u16()? as usize;
        let channels = r.u8()? as usize;
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::CorruptFile("zero image dimension".into()));
        }
        let (mask, kept) = match r.u8()? {
            TAG_CHECKERBOARD => {
                let phase = r.u8()?;
                if phase > 1 {
                    return Err(Error::CorruptFile(format!("checkerboard phase {phase}")));
                }
                let kept = checkerboard_mask(height, width, phase).kept_count();
                (MaskKind::Checkerboard { phase }, kept)
            }
            TAG_RANDOM => {
                let seed = r.u64()?;
                let keep_count = r.u32()?;
                if keep_count as usize > height * width {
                    return Err(Error::CorruptFile(format!("keep count {keep_count} too large")));
                }
                (MaskKind::Random { seed, keep_count }, keep_count as usize)
            }
            tag => return Err(Error::CorruptFile(format!("unknown mask tag {tag}"))),
        };
        let payload = r.take(kept * channels)?.to_vec();
        r.finish()?;
        Ok(Self {
            height,
            width,
            channels,
            mask,
            payload,
        })
    }

    /// Intensities of the kept pixels placed on a zero image.
    pub fn known_image(&self) -> Result<(ImageTensor<f32>, PixelMask)> {
        let mask = self.pixel_mask()?;
        let ch = self.channels;
        let mut img = ImageTensor::zeros(self.height, self.width, ch);
        for (i, p) in mask.kept_positions().enumerate() {
            for c in 0..ch {
                img.data[p * ch + c] = byte_to_intensity(self.payload[i * ch + c]);
            }
        }
        Ok((img, mask))
    }
}

/// Keep half the pixels (per `spec`) as bytes. Needs no dictionary.
pub fn compress(img: &ImageTensor<f32>, spec: MaskSpec) -> Result<CompressedImage> {
    let mask = spec.build(img.height, img.width)?;
    compress_with_mask(img, &mask)
}

pub fn compress_with_mask(img: &ImageTensor<f32>, mask: &PixelMask) -> Result<CompressedImage> {
    crate::masking::check_mask_shape(img, mask)?;
    if matches!(mask.kind, MaskKind::Explicit) {
        return Err(invalid("compressed images need a reproducible mask"));
    }
    let bytes = img.to_bytes().bytes;
    let ch = img.channels;
    let mut payload = Vec::with_capacity(mask.kept_count() * ch);
    for p in mask.kept_positions() {
        payload.extend_from_slice(&bytes[p * ch..(p + 1) * ch]);
    }
    Ok(CompressedImage {
        height: img.height,
        width: img.width,
        channels: ch,
        mask: mask.kind,
        payload,
    })
}

/// Rebuild the image: sparse-code the kept pixels and fill in the rest.
/// With `overwrite_kept` the stored pixels are copied into the output
/// verbatim; otherwise the pure reconstruction is returned everywhere.
pub fn decompress(
    c: &CompressedImage,
    dict: &Dictionary<f32>,
    params: &LcaParams,
    overwrite_kept: bool,
) -> Result<ImageTensor<f32>> {
    if dict.channels != c.channels {
        return Err(Error::IncompatibleDictionary(format!(
            "dictionary has {} channels, image {}",
            dict.channels, c.channels
        )));
    }
    dict.geometry(c.height, c.width)
        .map_err(|e| Error::IncompatibleDictionary(e.to_string()))?;
    let (known, mask) = c.known_image()?;
    let (out, _) = inpaint(&known, &mask, dict, params, overwrite_kept)?;
    Ok(out)
}

/// A dictionary together with the λ it was trained at.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryFile {
    pub dict: Dictionary<f32>,
    pub lambda: f32,
}

impl DictionaryFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let d = &self.dict;
        let mut out = Vec::with_capacity(24 + d.atoms.len() * 4);
        out.extend_from_slice(DICT_MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&narrow::<u32>(d.num_atoms(), "atoms")?.to_le_bytes());
        out.extend_from_slice(&narrow::<u16>(d.patch_h, "patch_h")?.to_le_bytes());
        out.extend_from_slice(&narrow::<u16>(d.patch_w, "patch_w")?.to_le_bytes());
        out.push(narrow::<u8>(d.channels, "channels")?);
        out.extend_from_slice(&narrow::<u16>(d.stride, "stride")?.to_le_bytes());
        out.push(d.padding.tag());
        out.extend_from_slice(&self.lambda.to_le_bytes());
        put_f32s(&mut out, d.atoms.iter());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dictionary");
        r.magic(DICT_MAGIC)?;
        let k = r.u32()? as usize;
        let patch_h = r.u16()? as usize;
        let patch_w = r.u16()? as usize;
        let channels = r.u8()? as usize;
        let stride = r.u16()? as usize;
        let padding = Padding::from_tag(r.u8()?)
            .ok_or_else(|| Error::CorruptFile("dictionary: unknown padding".into()))?;
        let lambda = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        let len = patch_h * patch_w * channels;
        let data = r.f32s(k * len)?;
        r.finish()?;
        let atoms = Array2::from_shape_vec((k, len), data).expect("length checked");
        let dict = Dictionary::new(atoms, (patch_h, patch_w), channels, stride, padding)
            .map_err(|e| Error::CorruptFile(e.to_string()))?;
        Ok(Self { dict, lambda })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Serialize autoencoder weights (momentum buffers are not stored).
pub fn ae_to_bytes(params: &AutoencoderParams<f32>) -> Result<Vec<u8>> {
    let g = &params.geometry;
    let mut out = Vec::new();
    out.extend_from_slice(AE_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&narrow::<u16>(g.image_h, "height")?.to_le_bytes());
    out.extend_from_slice(&narrow::<u16>(g.image_w, "width")?.to_le_bytes());
    out.push(narrow::<u8>(g.channels, "channels")?);
    out.push(narrow::<u8>(g.patch_h, "kernel_h")?);
    out.push(narrow::<u8>(g.patch_w, "kernel_w")?);
    out.push(narrow::<u8>(g.stride, "stride")?);
    out.extend_from_slice(&narrow::<u16>(params.out_channels(), "out_channels")?.to_le_bytes());
    out.push(params.is_tied() as u8);

    let mut shapes: Vec<Vec<usize>> = vec![
        params.enc_w.shape().to_vec(),
        params.enc_b.shape().to_vec(),
    ];
    if let Some(w) = &params.dec_w {
        shapes.push(w.shape().to_vec());
    }
    shapes.push(params.dec_b.shape().to_vec());
    out.push(shapes.len() as u8);
    for s in &shapes {
        out.push(s.len() as u8);
        for &d in s {
            out.extend_from_slice(&narrow::<u32>(d, "dimension")?.to_le_bytes());
        }
    }
    put_f32s(&mut out, params.enc_w.iter());
    put_f32s(&mut out, params.enc_b.iter());
    if let Some(w) = &params.dec_w {
        put_f32s(&mut out, w.iter());
    }
    put_f32s(&mut out, params.dec_b.iter());
    Ok(out)
}

pub fn ae_from_bytes(bytes: &[u8]) -> Result<AutoencoderParams<f32>> {
    let mut r = Reader::new(bytes, "autoencoder checkpoint");
    r.magic(AE_MAGIC)?;
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    let c = r.u8()? as usize;
    let kh = r.u8()? as usize;
    let kw = r.u8()? as usize;
    let stride = r.u8()? as usize;
    let oc = r.u16()? as usize;
    let tied = match r.u8()? {
        0 => false,
        1 => true,
        t => return Err(Error::CorruptFile(format!("autoencoder: tied flag {t}"))),
    };
    let cfg = AeConfig {
        image: (h, w, c),
        kernel: (kh, kw),
        stride,
        out_channels: oc,
        tied_weights: tied,
        ..AeConfig::default()
    };
    let geometry = cfg.geometry().map_err(|e| Error::CorruptFile(e.to_string()))?;
    let code = geometry.positions() * oc;
    let input = geometry.image_len();
    let mut expected = vec![vec![oc, geometry.patch_len()], vec![oc]];
    if !tied {
        expected.push(vec![input, code]);
    }
    expected.push(vec![input]);

    let count = r.u8()? as usize;
    if count != expected.len() {
        return Err(Error::CorruptFile(format!("autoencoder: {count} tensors")));
    }
    for want in &expected {
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &dims != want {
            return Err(Error::CorruptFile(format!(
                "autoencoder: tensor shape {dims:?}, expected {want:?}"
            )));
        }
    }
    let enc_w = Array2::from_shape_vec((oc, geometry.patch_len()), r.f32s(oc * geometry.patch_len())?)
        .expect("length checked");
    let enc_b = Array1::from(r.f32s(oc)?);
    let dec_w = if tied {
        None
    } else {
        Some(Array2::from_shape_vec((input, code), r.f32s(input * code)?).expect("length checked"))
    };
    let dec_b = Array1::from(r.f32s(input)?);
    r.finish()?;
    Ok(AutoencoderParams {
        geometry,
        enc_w,
        enc_b,
        dec_w,
        dec_b,
    })
}

pub fn tensor_to_bytes(img: &ImageTensor<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(19 + img.len() * 4);
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(FORMAT_VERSION);
    out.push(0);
    out.push(3);
    for d in [img.height, img.width, img.channels] {
        out.extend_from_slice(&narrow::<u32>(d, "dimension")?.to_le_bytes());
    }
    put_f32s(&mut out, img.data.iter());
    Ok(out)
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<ImageTensor<f32>> {
    let mut r = Reader::new(bytes, "tensor");
    r.magic(TENSOR_MAGIC)?;
    if r.u8()? != 0 || r.u8()? != 3 {
        return Err(Error::CorruptFile("tensor: expected rank-3 f32".into()));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let c = r.u32()? as usize;
    let data = r.f32s(h * w * c)?;
    r.finish()?;
    ImageTensor::from_vec(h, w, c, data)
}

/// One manifest row of an interchange directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub filename: String,
    pub label: Option<u8>,
    pub method: String,
}

pub const MANIFEST: &str = "manifest.csv";

/// Write images as `.sct` tensors plus `manifest.csv` into `dir`.
pub fn write_interchange(
    dir: impl AsRef<Path>,
    images: &[ImageTensor<f32>],
    labels: Option<&[u8]>,
    method: &str,
) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    if method.contains([',', '\n', '"']) {
        return Err(invalid("method tag may not contain commas, quotes or newlines"));
    }
    if let Some(l) = labels {
        if l.len() != images.len() {
            return Err(invalid("one label per image required"));
        }
    }
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let filename = format!("{method}_{i:05}.sct");
        fs::write(dir.join(&filename), tensor_to_bytes(img)?)?;
        entries.push(ManifestEntry {
            filename,
            label: labels.map(|l| l[i]),
            method: method.to_string(),
        });
    }
    let mut manifest = fs::File::create(dir.join(MANIFEST))?;
    writeln!(manifest, "filename,label,method")?;
    for e in &entries {
        let label = e.label.map(|l| l.to_string()).unwrap_or_default();
        writeln!(manifest, "{},{},{}", e.filename, label, e.method)?;
    }
    Ok(entries)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("filename,label,method") {
        return Err(Error::CorruptFile(format!("{}: bad header", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::CorruptFile(format!("manifest row `{line}`")));
            }
            let label = if cols[1].is_empty() {
                None
            } else {
                Some(cols[1].parse().map_err(|_| Error::CorruptFile(format!("label `{}`", cols[1])))?)
            };
            Ok(ManifestEntry {
                filename: cols[0].to_string(),
                label,
                method: cols[2].to_string(),
            })
        })
        .collect()
}

/// Load every tensor listed in a directory's manifest, in manifest order.
pub fn read_interchange(dir: impl AsRef<Path>) -> Result<(Vec<ManifestEntry>, Vec<ImageTensor<f32>>)> {
    let dir: PathBuf = dir.as_ref().to_path_buf();
    let entries = read_manifest(&dir)?;
    let images = entries
        .iter()
        .map(|e| tensor_from_bytes(&fs::read(dir.join(&e.filename))?))
        .collect::<Result<Vec<_>>>()?;
    Ok((entries, images))
}
