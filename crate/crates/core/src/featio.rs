//! Feature-map files, a patch descriptor for backbone-free runs, and the
//! 2×2 max-pool that derives coarse features from fine ones.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{normalize_in_place, FeatureMap, NORM_TOLERANCE};
use crate::wire::{self, WireReader};

const FEATURE_MAGIC: &[u8; 4] = b"SNCF";
const FEATURE_VERSION: u32 = 1;

/// A single-channel image with `f32` intensities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let pixels = (0..height * width).map(|n| f(n / width, n % width)).collect();
        Self {
            height,
            width,
            pixels,
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }
}

/// Reads an 8-bit PGM or PPM file. Colour images are converted with
/// `0.299 R + 0.587 G + 0.114 B`.
pub fn read_pnm_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let mut reader = ImageReader::open(path)?;
    reader.set_format(ImageFormat::Pnm);
    let img = reader.decode()?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let pixels = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(f32::from).collect(),
        DynamicImage::ImageRgb8(buf) => buf
            .into_raw()
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
            .collect(),
        other => {
            return Err(Error::InvalidArgument(format!(
                "only 8-bit PGM/PPM images are supported, got {:?}",
                other.color()
            )))
        }
    };
    GrayImage::new(height, width, pixels)
}

/// Dense descriptors from `patch × patch` windows sampled every `stride`
/// pixels. Each descriptor is the mean-subtracted, L2-normalised patch;
/// constant patches give the zero vector.
pub fn extract_patch_descriptors(
    image: &GrayImage,
    patch: usize,
    stride: usize,
) -> Result<FeatureMap> {
    if patch < 2 || stride < 1 {
        return Err(Error::InvalidArgument(format!(
            "patch must be >= 2 and stride >= 1, got patch={patch} stride={stride}"
        )));
    }
    if image.height < patch || image.width < patch {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} is smaller than the {patch}x{patch} patch",
            image.height, image.width
        )));
    }
    let h = (image.height - patch) / stride + 1;
    let w = (image.width - patch) / stride + 1;
    let c = patch * patch;
    let mut values = vec![0f32; h * w * c];
    par::for_each_chunk_mut(&mut values, w * c, |row, out| {
        for (col, desc) in out.chunks_exact_mut(c).enumerate() {
            let (y0, x0) = (row * stride, col * stride);
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            let mut sum = 0f64;
            for dy in 0..patch {
                for dx in 0..patch {
                    let v = image.at(y0 + dy, x0 + dx);
                    desc[dy * patch + dx] = v;
                    lo = lo.min(v);
                    hi = hi.max(v);
                    sum += v as f64;
                }
            }
            if lo == hi {
                desc.fill(0.0);
                continue;
            }
            let mean = (sum / c as f64) as f32;
            desc.iter_mut().for_each(|v| *v -= mean);
            normalize_in_place(desc);
        }
    });
    FeatureMap::new(h, w, c, values, [stride as f32, stride as f32])
}

/// 2×2 stride-2 per-channel max-pooling. Odd trailing rows/columns are
/// dropped; pooled descriptors are re-normalised and the pixel scale doubles.
pub fn maxpool2x2(fine: &FeatureMap) -> Result<FeatureMap> {
    let (h, w, c) = (fine.height() / 2, fine.width() / 2, fine.channels());
    if h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "cannot pool a {}x{} map",
            fine.height(),
            fine.width()
        )));
    }
    let mut values = vec![0f32; h * w * c];
    par::for_each_chunk_mut(&mut values, w * c, |row, out| {
        for (col, desc) in out.chunks_exact_mut(c).enumerate() {
            desc.copy_from_slice(fine.descriptor(2 * row, 2 * col));
            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                let other = fine.descriptor(2 * row + dy, 2 * col + dx);
                desc.iter_mut().zip(other).for_each(|(d, &o)| *d = d.max(o));
            }
            normalize_in_place(desc);
        }
    });
    let [sy, sx] = fine.pixel_scale();
    FeatureMap::new(h, w, c, values, [2.0 * sy, 2.0 * sx])
}

pub fn write_feature_map<W: Write>(map: &FeatureMap, mut out: W) -> Result<()> {
    out.write_all(FEATURE_MAGIC)?;
    wire::put_u32(&mut out, FEATURE_VERSION)?;
    for d in [map.height(), map.width(), map.channels()] {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))?;
        wire::put_u32(&mut out, d)?;
    }
    let [sy, sx] = map.pixel_scale();
    wire::put_f32(&mut out, sy)?;
    wire::put_f32(&mut out, sx)?;
    let mut buf = Vec::with_capacity(map.values().len() * 4);
    for v in map.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Parses a feature-map stream. Descriptors whose norm is off by more than
/// [`NORM_TOLERANCE`] are re-normalised; valid maps round-trip bit-exactly.
pub fn read_feature_map<R: Read>(input: R) -> Result<FeatureMap> {
    let mut rd = WireReader::new(input);
    rd.expect_magic(*FEATURE_MAGIC)?;
    let version = rd.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::BadVersion(version));
    }
    let h = rd.u32("height")? as usize;
    let w = rd.u32("width")? as usize;
    let c = rd.u32("channels")? as usize;
    let sy = rd.f32("pixel scale")?;
    let sx = rd.f32("pixel scale")?;
    let n = h
        .checked_mul(w)
        .and_then(|hw| hw.checked_mul(c))
        .ok_or_else(|| Error::InvalidArgument(format!("feature map {h}x{w}x{c} too large")))?;
    let mut values = rd.f32_vec(n, "feature values")?;
    if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(idx));
    }
    if c > 0 {
        for desc in values.chunks_exact_mut(c) {
            let norm = desc.iter().map(|x| x * x).sum::<f32>().sqrt();
            if norm > 0.0 && (norm - 1.0).abs() > NORM_TOLERANCE {
                normalize_in_place(desc);
            }
        }
    }
    FeatureMap::new(h, w, c, values, [sy, sx])
}

pub fn save_feature_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_feature_map(map, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    read_feature_map(BufReader::new(File::open(path)?))
}
