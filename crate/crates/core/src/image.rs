//! Image container, PNG/PPM I/O, patch extraction and augmentation.
//!
//! Intensities are stored as `f64` in row-major `(row, col, channel)` order.
//! Loaded images are normalized to `[0, 1]`; derived feature maps reuse the
//! same container and may hold any real value.

use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `height × width × channels` image, channels in R, G, B order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::shape(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "data length {} does not match {height}x{width}x{channels}",
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

    /// Panics if `channels` is not 1 or 3.
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds an image from `f(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Self::zeros(height, width, channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    let i = img.index(r, c, ch);
                    img.data[i] = f(r, c, ch);
                }
            }
        }
        img
    }

    /// Stacks single-channel planes into one image (1 or 3 planes).
    pub fn from_planes(planes: &[&ImageTensor]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::shape("no planes to stack"))?;
        for p in planes {
            if p.channels != 1 || p.height != first.height || p.width != first.width {
                return Err(Error::shape("planes must be single-channel and equally sized"));
            }
        }
        let n = planes.len();
        let mut data = Vec::with_capacity(first.pixel_count() * n);
        for i in 0..first.pixel_count() {
            data.extend(planes.iter().map(|p| p.data[i]));
        }
        Self::new(first.height, first.width, n, data)
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

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = v;
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = self.index(row, col, 0);
        &self.data[i..i + self.channels]
    }

    /// Extracts one channel as a single-channel image.
    pub fn channel(&self, ch: usize) -> ImageTensor {
        assert!(ch < self.channels, "channel {ch} out of range");
        let data = self
            .data
            .iter()
            .skip(ch)
            .step_by(self.channels)
            .copied()
            .collect();
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        ImageTensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Elementwise combination of two equally shaped images.
    pub fn zip_map(&self, other: &ImageTensor, f: impl Fn(f64, f64) -> f64) -> Result<ImageTensor> {
        self.check_same_shape(other)?;
        Ok(ImageTensor {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        })
    }

    pub fn check_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    /// True when every value lies in `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamped01(&self) -> ImageTensor {
        self.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
    }

    /// Replicates a greyscale image to three channels; RGB input is cloned.
    pub fn to_rgb(&self) -> ImageTensor {
        if self.channels == 3 {
            return self.clone();
        }
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: 3,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<ImageTensor> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::shape(format!(
                "crop {height}x{width} at ({row},{col}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for r in row..row + height {
            let start = self.index(r, col, 0);
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(ImageTensor {
            height,
            width,
            channels: self.channels,
            data,
        })
    }

    /// Applies a pixel permutation. Rotations require a square image.
    pub fn augmented(&self, op: Augment) -> Result<ImageTensor> {
        let (h, w) = (self.height, self.width);
        if op.is_rotation() && h != w {
            return Err(Error::shape(format!(
                "rotation {op:?} needs a square image, got {h}x{w}"
            )));
        }
        let src = |r: usize, c: usize| -> (usize, usize) {
            match op {
                Augment::Identity => (r, c),
                Augment::FlipH => (r, w - 1 - c),
                Augment::FlipV => (h - 1 - r, c),
                Augment::Rot90 => (c, w - 1 - r),
                Augment::Rot180 => (h - 1 - r, w - 1 - c),
                Augment::Rot270 => (h - 1 - c, r),
            }
        };
        let mut out = ImageTensor::zeros(h, w, self.channels);
        for r in 0..h {
            for c in 0..w {
                let (sr, sc) = src(r, c);
                let d = out.index(r, c, 0);
                let s = self.index(sr, sc, 0);
                out.data[d..d + self.channels].copy_from_slice(&self.data[s..s + self.channels]);
            }
        }
        Ok(out)
    }
}

/// Per-pixel maximum over the R, G, B channels.
pub fn channel_max(img: &ImageTensor) -> Result<ImageTensor> {
    if img.channels() != 3 {
        return Err(Error::shape(format!(
            "channel_max needs 3 channels, got {}",
            img.channels()
        )));
    }
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| p[0].max(p[1]).max(p[2]))
        .collect();
    ImageTensor::new(img.height(), img.width(), 1, data)
}

/// Loads a PNG (8/16-bit, grey or RGB) or PPM/PGM file, normalized to `[0, 1]`.
/// Alpha channels are dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: match other {
                    Some(f) => format!("{f:?} is not supported (PNG or PPM required)"),
                    None => "unrecognized file signature".into(),
                },
            })
        }
    }
    let decoded = reader.decode().map_err(|e| match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        image::ImageError::Unsupported(u) => Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: u.to_string(),
        },
        other => Error::CorruptImage {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    Ok(from_dynamic(decoded))
}

fn from_dynamic(img: DynamicImage) -> ImageTensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f64>) = match img {
        DynamicImage::ImageLuma8(b) => (1, norm8(b.as_raw())),
        DynamicImage::ImageLumaA8(b) => (1, norm8(&strip_alpha(b.as_raw(), 2))),
        DynamicImage::ImageRgb8(b) => (3, norm8(b.as_raw())),
        DynamicImage::ImageRgba8(b) => (3, norm8(&strip_alpha(b.as_raw(), 4))),
        DynamicImage::ImageLuma16(b) => (1, norm16(b.as_raw())),
        DynamicImage::ImageLumaA16(b) => (1, norm16(&strip_alpha(b.as_raw(), 2))),
        DynamicImage::ImageRgb16(b) => (3, norm16(b.as_raw())),
        DynamicImage::ImageRgba16(b) => (3, norm16(&strip_alpha(b.as_raw(), 4))),
        other => {
            let rgb = other.to_rgb32f();
            (
                3,
                rgb.as_raw()
                    .iter()
                    .map(|&v| f64::from(v).clamp(0.0, 1.0))
                    .collect(),
            )
        }
    };
    ImageTensor {
        height: h,
        width: w,
        channels,
        data,
    }
}

fn strip_alpha<T: Copy>(raw: &[T], stride: usize) -> Vec<T> {
    raw.chunks_exact(stride)
        .flat_map(|px| px[..stride - 1].iter().copied())
        .collect()
}

fn norm8(raw: &[u8]) -> Vec<f64> {
    raw.iter().map(|&v| f64::from(v) / 255.0).collect()
}

fn norm16(raw: &[u16]) -> Vec<f64> {
    raw.iter().map(|&v| f64::from(v) / 65535.0).collect()
}

/// 8-bit quantization with round-half-up; out-of-range values saturate.
pub fn quantize_u8(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Writes an 8-bit PNG (greyscale for 1 channel, RGB for 3).
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize_u8(v)).collect();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let dynimg = if img.channels() == 1 {
        DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, bytes).expect("sized buffer"))
    } else {
        DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, bytes).expect("sized buffer"))
    };
    dynimg
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(source) => Error::io(path, source),
            other => Error::io(path, std::io::Error::other(other.to_string())),
        })
}

/// A crop of a source image used as one training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub source_id: String,
    /// `(row, col)` of the top-left corner in the source image.
    pub origin: (usize, usize),
    pub tensor: ImageTensor,
}

/// Draws `count` uniformly placed `size × size` crops, reproducible for a seed.
pub fn sample_patches(
    img: &ImageTensor,
    source_id: &str,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<Patch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| sample_patch_with(img, source_id, size, &mut rng))
        .collect()
}

pub fn sample_patch_with<R: Rng + ?Sized>(
    img: &ImageTensor,
    source_id: &str,
    size: usize,
    rng: &mut R,
) -> Result<Patch> {
    if size == 0 || img.height() < size || img.width() < size {
        return Err(Error::shape(format!(
            "{source_id}: image {}x{} is smaller than patch size {size}",
            img.height(),
            img.width()
        )));
    }
    let row = rng.random_range(0..=img.height() - size);
    let col = rng.random_range(0..=img.width() - size);
    Ok(Patch {
        source_id: source_id.to_string(),
        origin: (row, col),
        tensor: img.crop(row, col, size, size)?,
    })
}

/// Pixel permutations used for training-time augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Augment {
    Identity,
    FlipH,
    FlipV,
    Rot90,
    Rot180,
    Rot270,
}

impl Augment {
    pub const ALL: [Augment; 6] = [
        Augment::Identity,
        Augment::FlipH,
        Augment::FlipV,
        Augment::Rot90,
        Augment::Rot180,
        Augment::Rot270,
    ];

    pub fn is_rotation(self) -> bool {
        matches!(self, Augment::Rot90 | Augment::Rot180 | Augment::Rot270)
    }

    /// Uniform choice among the six ops.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Augment {
        Self::ALL[rng.random_range(0..Self::ALL.len())]
    }
}

pub fn augment(patch: &Patch, op: Augment) -> Result<Patch> {
    Ok(Patch {
        source_id: patch.source_id.clone(),
        origin: patch.origin,
        tensor: patch.tensor.augmented(op)?,
    })
}

/// Applies an op drawn from a seeded RNG; returns the op alongside the patch.
pub fn augment_random(patch: &Patch, seed: u64) -> Result<(Augment, Patch)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let op = Augment::random(&mut rng);
    Ok((op, augment(patch, op)?))
}
