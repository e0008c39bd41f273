//! Images, datasets, the synthetic blob generator and on-disk formats.
//!
//! # Tensor file layout
//!
//! ```text
//! offset  size  field
//! 0       8     magic "CLIMTNSR"
//! 8       4     version (u32, = 1)
//! 12      1     dtype (u8, 0 = f32)
//! 13      1     has_labels (u8, 0 or 1)
//! 14      4     n
//! 18      4     H
//! 22      4     W
//! 26      4     C
//! 30      ...   n*H*W*C f32 values, row-major (image, row, column, channel)
//! ...     ...   n u32 labels when has_labels == 1
//! ```
//!
//! Every multi-byte value is little-endian. Readers ignore bytes after the
//! label block; checkpoints use that space for their parameter index.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augmentation::resize_bilinear;
use crate::error::{ClimError, Result};
use crate::numerics::Rng;

pub const TENSOR_MAGIC: &[u8; 8] = b"CLIMTNSR";
pub const TENSOR_VERSION: u32 = 1;
pub const TENSOR_HEADER_LEN: usize = 30;

/// Dense `H×W×C` raster with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(ClimError::ShapeMismatch(format!(
                "{} pixels for a {height}x{width}x{channels} image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ClimError::invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Builds an image whose values the caller guarantees are in range.
    pub(crate) fn from_raw(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            pixels,
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::from_raw(height, width, channels, vec![value.clamp(0.0, 1.0); height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[self.index(y, x, c)]
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<Image>,
    labels: Option<Vec<u32>>,
    class_count: Option<u32>,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Option<Vec<u32>>) -> Result<Self> {
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|im| im.shape() != first.shape()) {
                return Err(ClimError::ShapeMismatch(format!(
                    "dataset images differ in shape: {:?} vs {:?}",
                    first.shape(),
                    bad.shape()
                )));
            }
        }
        let class_count = match &labels {
            Some(l) => {
                if l.len() != images.len() {
                    return Err(ClimError::DimensionMismatch {
                        left: images.len(),
                        right: l.len(),
                    });
                }
                Some(l.iter().max().map_or(0, |m| m + 1))
            }
            None => None,
        };
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    /// Like [`Dataset::new`] but with an explicit class count.
    pub fn with_class_count(images: Vec<Image>, labels: Vec<u32>, class_count: u32) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(ClimError::invalid(format!("label {bad} >= class count {class_count}")));
        }
        let mut ds = Self::new(images, Some(labels))?;
        ds.class_count = Some(class_count);
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &Image {
        &self.images[i]
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn class_count(&self) -> Option<u32> {
        self.class_count
    }

    /// `(H, W, C)` of every image, or `None` when empty.
    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(Image::shape)
    }

    pub fn require_labels(&self) -> Result<&[u32]> {
        self.labels.as_deref().ok_or(ClimError::LabelsRequired)
    }

    /// Same images with labels removed.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            images: self.images.clone(),
            labels: None,
            class_count: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub per_class: usize,
    pub latent_dim: usize,
    pub image_side: usize,
    pub channels: usize,
    pub blob_stddev: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            class_count: 10,
            per_class: 200,
            latent_dim: 8,
            image_side: 16,
            channels: 3,
            blob_stddev: DEFAULT_BLOB_STDDEV,
            seed: 1,
        }
    }
}

pub const DEFAULT_BLOB_STDDEV: f64 = 0.6;

/// Side of the coarse random grid each basis image is upsampled from.
const BASIS_GRID: usize = 4;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("class_count", self.class_count),
            ("per_class", self.per_class),
            ("latent_dim", self.latent_dim),
            ("image_side", self.image_side),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ClimError::Config {
                    key: name.into(),
                    reason: "must be positive".into(),
                });
            }
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(ClimError::Config {
                key: "channels".into(),
                reason: format!("must be 1 or 3, got {}", self.channels),
            });
        }
        if !(self.blob_stddev > 0.0 && self.blob_stddev.is_finite()) {
            return Err(ClimError::Config {
                key: "blob_stddev".into(),
                reason: "must be a positive number".into(),
            });
        }
        Ok(())
    }
}

/// Class means for a synthetic spec, exposed for tests of class separation.
pub fn synthetic_class_means(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(spec.seed).split(0);
    (0..spec.class_count)
        .map(|_| (0..spec.latent_dim).map(|_| rng.normal()).collect())
        .collect()
}

/// Gaussian blobs in latent space rendered through a fixed random linear map
/// and a sigmoid.
///
/// Each latent coordinate owns one basis image: a coarse Gaussian grid
/// upsampled bilinearly, so the map is linear but spatially smooth and crops
/// keep class information. Labels are recorded in class-major order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let means = synthetic_class_means(spec);

    let side = spec.image_side;
    let c = spec.channels;
    let mut basis_rng = root.split(1);
    let basis: Vec<Vec<f64>> = (0..spec.latent_dim)
        .map(|_| {
            let coarse: Vec<f64> = (0..BASIS_GRID * BASIS_GRID * c)
                .map(|_| basis_rng.normal())
                .collect();
            resize_bilinear(&coarse, BASIS_GRID, BASIS_GRID, c, side, side)
        })
        .collect();
    let gain = 2.0 / (spec.latent_dim as f64).sqrt();

    let mut sample_rng = root.split(2);
    let mut images = Vec::with_capacity(spec.class_count * spec.per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for (class, mu) in means.iter().enumerate() {
        for _ in 0..spec.per_class {
            let z: Vec<f64> = mu
                .iter()
                .map(|m| m + spec.blob_stddev * sample_rng.normal())
                .collect();
            let mut pixels = vec![0.0; side * side * c];
            for (zl, b) in z.iter().zip(&basis) {
                for (p, bv) in pixels.iter_mut().zip(b) {
                    *p += zl * bv;
                }
            }
            for p in pixels.iter_mut() {
                let s = 1.0 / (1.0 + (-gain * *p).exp());
                // Stored at f32 precision so the tensor file round trip is exact.
                *p = (s as f32 as f64).clamp(0.0, 1.0);
            }
            images.push(Image::from_raw(side, side, c, pixels));
            labels.push(class as u32);
        }
    }
    Dataset::with_class_count(images, labels, spec.class_count as u32)
}

fn read_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(buf[at..at + 4].try_into().expect("4 bytes"))
}

/// Parsed tensor-file header plus the offset of the first payload byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorHeader {
    pub n: u32,
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub has_labels: bool,
}

impl TensorHeader {
    pub fn payload_values(&self) -> Result<usize> {
        [self.height, self.width, self.channels]
            .iter()
            .try_fold(self.n as usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or(ClimError::DimOverflow)
    }

    /// Total size of header, payload and labels.
    pub fn body_len(&self) -> Result<usize> {
        let payload = self
            .payload_values()?
            .checked_mul(4)
            .ok_or(ClimError::DimOverflow)?;
        let labels = if self.has_labels { self.n as usize * 4 } else { 0 };
        TENSOR_HEADER_LEN
            .checked_add(payload)
            .and_then(|v| v.checked_add(labels))
            .ok_or(ClimError::DimOverflow)
    }

    pub fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.push(0);
        out.push(u8::from(self.has_labels));
        for v in [self.n, self.height, self.width, self.channels] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn parse(buf: &[u8]) -> Result<Self> {
        if buf.len() < 8 || &buf[..8] != TENSOR_MAGIC {
            return Err(ClimError::BadMagic);
        }
        if buf.len() < TENSOR_HEADER_LEN {
            return Err(ClimError::Truncated {
                expected: TENSOR_HEADER_LEN as u64,
                found: buf.len() as u64,
            });
        }
        let version = read_u32(buf, 8);
        if version != TENSOR_VERSION {
            return Err(ClimError::UnsupportedVersion(version));
        }
        if buf[12] != 0 {
            return Err(ClimError::UnsupportedDtype(buf[12]));
        }
        let has_labels = match buf[13] {
            0 => false,
            1 => true,
            other => {
                return Err(ClimError::Malformed {
                    path: Default::default(),
                    reason: format!("has_labels byte {other}"),
                })
            }
        };
        let header = Self {
            n: read_u32(buf, 14),
            height: read_u32(buf, 18),
            width: read_u32(buf, 22),
            channels: read_u32(buf, 26),
            has_labels,
        };
        let need = header.body_len()?;
        if buf.len() < need {
            return Err(ClimError::Truncated {
                expected: need as u64,
                found: buf.len() as u64,
            });
        }
        Ok(header)
    }
}

fn u32_dim(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| ClimError::DimOverflow)
}

pub fn encode_tensor(ds: &Dataset) -> Result<Vec<u8>> {
    let (h, w, c) = ds.shape().unwrap_or((0, 0, 0));
    let header = TensorHeader {
        n: u32_dim(ds.len())?,
        height: u32_dim(h)?,
        width: u32_dim(w)?,
        channels: u32_dim(c)?,
        has_labels: ds.labels.is_some(),
    };
    let mut out = Vec::with_capacity(header.body_len()?);
    header.write(&mut out);
    for im in &ds.images {
        for &p in &im.pixels {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    if let Some(labels) = &ds.labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tensor(buf: &[u8]) -> Result<Dataset> {
    let header = TensorHeader::parse(buf)?;
    let (h, w, c) = (
        header.height as usize,
        header.width as usize,
        header.channels as usize,
    );
    let per_image = h * w * c;
    let mut at = TENSOR_HEADER_LEN;
    let mut images = Vec::with_capacity(header.n as usize);
    for _ in 0..header.n {
        let mut pixels = Vec::with_capacity(per_image);
        for _ in 0..per_image {
            let v = f32::from_le_bytes(buf[at..at + 4].try_into().expect("4 bytes")) as f64;
            at += 4;
            pixels.push(v);
        }
        images.push(Image::new(h, w, c, pixels)?);
    }
    let labels = header.has_labels.then(|| {
        (0..header.n as usize)
            .map(|i| read_u32(buf, at + 4 * i))
            .collect::<Vec<_>>()
    });
    Dataset::new(images, labels)
}

pub fn save_tensor_file(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(ds)?;
    fs::write(path, bytes).map_err(|e| ClimError::io(path, e))
}

pub fn load_tensor_file(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| ClimError::io(path, e))?;
    decode_tensor(&buf)
}

fn malformed(path: &Path, reason: impl Into<String>) -> ClimError {
    ClimError::Malformed {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Decodes a binary P6 pixmap into `[0, 1]` RGB.
pub fn decode_ppm(buf: &[u8], path: &Path) -> Result<Image> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < buf.len() {
            if buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else if buf[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() && buf[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(malformed(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(malformed(path, format!("expected P6, found {:?}", fields[0])));
    }
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| malformed(path, format!("bad {what} {s:?}")))
    };
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(malformed(path, "header values out of range"));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(malformed(path, "missing raster separator"));
    }
    pos += 1;
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let count = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(3))
        .ok_or(ClimError::DimOverflow)?;
    let need = count * bytes_per;
    if buf.len() - pos < need {
        return Err(malformed(path, format!("raster has {} of {need} bytes", buf.len() - pos)));
    }
    let raster = &buf[pos..pos + need];
    let max = maxval as f64;
    let pixels: Vec<f64> = if bytes_per == 1 {
        raster.iter().map(|&b| (b as f64 / max).min(1.0)).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|p| (u16::from_be_bytes([p[0], p[1]]) as f64 / max).min(1.0))
            .collect()
    };
    Ok(Image::from_raw(height, width, 3, pixels))
}

/// Encodes an image as an 8-bit P6 pixmap. Single-channel images are
/// replicated into RGB.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                let ch = if img.channels == 3 { c } else { 0 };
                out.push(quantize_u8(img.get(y, x, ch)));
            }
        }
    }
    out
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_ppm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| ClimError::io(path, e))?;
    f.write_all(&encode_ppm(img)).map_err(|e| ClimError::io(path, e))
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| ClimError::io(path, e))?;
    decode_ppm(&buf, path)
}

/// Loads every `*.ppm` in `dir` in lexicographic filename order, with labels
/// from an optional `labels.txt` of `filename<TAB>class` lines.
pub fn load_ppm_dir(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| ClimError::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| ClimError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".ppm") && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort();

    let mut images = Vec::with_capacity(names.len());
    for name in &names {
        let path = dir.join(name);
        let img = load_ppm(&path)?;
        if let Some(first) = images.first() {
            let first: &Image = first;
            if first.shape() != img.shape() {
                return Err(malformed(
                    &path,
                    format!(
                        "size {}x{} differs from {}x{}",
                        img.width, img.height, first.width, first.height
                    ),
                ));
            }
        }
        images.push(img);
    }

    let label_path = dir.join("labels.txt");
    let labels = if label_path.is_file() {
        let text = fs::read_to_string(&label_path).map_err(|e| ClimError::io(&label_path, e))?;
        let mut by_name = std::collections::HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (file, class) = line
                .split_once('\t')
                .ok_or_else(|| malformed(&label_path, format!("line {}: missing tab", lineno + 1)))?;
            let class: u32 = class.trim().parse().map_err(|_| {
                malformed(&label_path, format!("line {}: bad class {class:?}", lineno + 1))
            })?;
            by_name.insert(file.to_string(), class);
        }
        let labels = names
            .iter()
            .map(|n| {
                by_name
                    .get(n)
                    .copied()
                    .ok_or_else(|| malformed(&label_path, format!("no label for {n}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(labels)
    } else {
        None
    };
    Dataset::new(images, labels)
}
