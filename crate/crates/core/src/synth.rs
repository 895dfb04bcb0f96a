//! Seeded ring-segmentation dataset.
//!
//! Each sample is a bright annulus on a darker background with a linear
//! brightness gradient and additive Gaussian noise; the mask is the exact
//! annulus. Everything is drawn from one ChaCha8 stream, so a set is a pure
//! function of `(seed, count, size)`.
//!
//! File layout (little-endian): `"SPDD"`, version byte `1`, u32 count,
//! u32 height, u32 width, then all images as f32 row-major, then all masks
//! as u8 `{0,1}` row-major.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::engine::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"SPDD";
pub const VERSION: u8 = 1;
pub const MIN_SIZE: usize = 16;
/// Accepted range of the mask's positive-pixel fraction.
pub const MASK_FRACTION: (f64, f64) = (0.02, 0.5);
/// The file carries no split, so it is derived from the count with this
/// fixed shuffle seed.
pub const SPLIT_SEED: u64 = 0x0053_504c_4954;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("size {0} is below the minimum of 16")]
    Size(usize),
    #[error("count must be positive")]
    EmptyCount,
    #[error("dataset format: {0}")]
    Format(String),
    #[error("dataset truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// 60/20/20 by rounding, over a seeded permutation of `0..count`.
    pub fn new(count: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..count).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let train = (count as f64 * 0.6).round() as usize;
        let validation = ((count as f64 * 0.2).round() as usize).min(count - train);
        let test = idx.split_off(train + validation);
        let validation_idx = idx.split_off(train);
        Split {
            train: idx,
            validation: validation_idx,
            test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    Train,
    Validation,
    Test,
    All,
}

impl std::str::FromStr for Subset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Subset::Train),
            "validation" | "val" => Ok(Subset::Validation),
            "test" => Ok(Subset::Test),
            "all" => Ok(Subset::All),
            _ => Err(format!("unknown split `{s}` (train, validation, test, all)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSet {
    pub height: usize,
    pub width: usize,
    pub images: Vec<Vec<f32>>,
    pub masks: Vec<Vec<u8>>,
    pub split: Split,
}

/// Drawn parameters of one sample, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingParams {
    pub cx: f64,
    pub cy: f64,
    pub outer: f64,
    pub inner: f64,
    pub background: f64,
    pub contrast: f64,
    pub gradient: (f64, f64),
    pub sigma: f64,
}

impl RingParams {
    /// Without noise, thresholding the image here recovers the mask.
    pub fn threshold(&self) -> f64 {
        self.background + self.contrast / 2.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GenerateOptions {
    /// Replaces the drawn noise level (the draw still happens).
    pub sigma_override: Option<f64>,
}

fn draw(rng: &mut ChaCha8Rng, size: f64) -> RingParams {
    let cx = rng.random_range(0.3..=0.7) * size;
    let cy = rng.random_range(0.3..=0.7) * size;
    let outer = rng.random_range(0.2..=0.4) * size;
    let inner = outer * rng.random_range(0.3..=0.6);
    RingParams {
        cx,
        cy,
        outer,
        inner,
        background: rng.random_range(0.05..=0.3),
        contrast: rng.random_range(0.3..=0.6),
        gradient: (rng.random_range(-0.1..=0.1), rng.random_range(-0.1..=0.1)),
        sigma: rng.random_range(0.05..=0.2),
    }
}

fn ring_mask(p: &RingParams, size: usize) -> Vec<u8> {
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - p.cx, y as f64 + 0.5 - p.cy);
            let d = (dx * dx + dy * dy).sqrt();
            mask[y * size + x] = u8::from(d >= p.inner && d <= p.outer);
        }
    }
    mask
}

/// One sample with its parameters; rejected draws are redrawn from the
/// same stream.
pub fn draw_sample(rng: &mut ChaCha8Rng, size: usize, opts: GenerateOptions) -> (Vec<f32>, Vec<u8>, RingParams) {
    let s = size as f64;
    let (mut p, mask) = loop {
        let p = draw(rng, s);
        let mask = ring_mask(&p, size);
        let frac = mask.iter().map(|&m| m as f64).sum::<f64>() / (size * size) as f64;
        if (MASK_FRACTION.0..=MASK_FRACTION.1).contains(&frac) {
            break (p, mask);
        }
    };
    if let Some(sigma) = opts.sigma_override {
        p.sigma = sigma;
    }
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut image = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let shade = p.gradient.0 * ((x as f64 + 0.5) / s - 0.5) + p.gradient.1 * ((y as f64 + 0.5) / s - 0.5);
            let z: f64 = noise.sample(rng);
            let v = p.background + shade + p.contrast * mask[i] as f64 + p.sigma * z;
            image[i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    (image, mask, p)
}

pub fn generate(seed: u64, count: usize, size: usize) -> Result<SegmentationSet, DataError> {
    generate_with(seed, count, size, GenerateOptions::default()).map(|(set, _)| set)
}

pub fn generate_with(
    seed: u64,
    count: usize,
    size: usize,
    opts: GenerateOptions,
) -> Result<(SegmentationSet, Vec<RingParams>), DataError> {
    if size < MIN_SIZE {
        return Err(DataError::Size(size));
    }
    if count == 0 {
        return Err(DataError::EmptyCount);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count);
    let mut masks = Vec::with_capacity(count);
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let (img, mask, p) = draw_sample(&mut rng, size, opts);
        images.push(img);
        masks.push(mask);
        params.push(p);
    }
    let set = SegmentationSet {
        height: size,
        width: size,
        images,
        masks,
        split: Split::new(count, SPLIT_SEED),
    };
    Ok((set, params))
}

impl SegmentationSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn indices(&self, subset: Subset) -> Vec<usize> {
        match subset {
            Subset::Train => self.split.train.clone(),
            Subset::Validation => self.split.validation.clone(),
            Subset::Test => self.split.test.clone(),
            Subset::All => (0..self.len()).collect(),
        }
    }

    /// Images at `indices` as an `(n, 1, H, W)` tensor.
    pub fn image_batch<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let data = indices
            .iter()
            .flat_map(|&i| self.images[i].iter().map(|&v| T::of(v as f64)))
            .collect();
        Tensor::from_vec([indices.len(), 1, self.height, self.width], data)
    }

    pub fn mask_batch<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let data = indices
            .iter()
            .flat_map(|&i| self.masks[i].iter().map(|&v| T::of(v as f64)))
            .collect();
        Tensor::from_vec([indices.len(), 1, self.height, self.width], data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(17 + n * self.pixels() * 5);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        for v in [n, self.height, self.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for img in &self.images {
            for v in img {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for m in &self.masks {
            out.extend_from_slice(m);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        const HEADER: usize = 17;
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(DataError::Format("bad magic, expected SPDD".into()));
        }
        if bytes.len() < HEADER {
            return Err(DataError::Truncated {
                expected: HEADER,
                actual: bytes.len(),
            });
        }
        if bytes[4] != VERSION {
            return Err(DataError::Format(format!("unsupported version {}", bytes[4])));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().expect("4 bytes")) as usize;
        let (n, h, w) = (word(0), word(1), word(2));
        let px = h * w;
        let expected = HEADER + n * px * 4 + n * px;
        if bytes.len() != expected {
            return Err(DataError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        let img_bytes = &bytes[HEADER..HEADER + n * px * 4];
        let images = img_bytes
            .chunks_exact(px * 4)
            .map(|c| {
                c.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect()
            })
            .collect();
        let masks: Vec<Vec<u8>> = bytes[HEADER + n * px * 4..]
            .chunks_exact(px)
            .map(<[u8]>::to_vec)
            .collect();
        if masks.iter().flatten().any(|&m| m > 1) {
            return Err(DataError::Format("mask values must be 0 or 1".into()));
        }
        Ok(SegmentationSet {
            height: h,
            width: w,
            images,
            masks,
            split: Split::new(n, SPLIT_SEED),
        })
    }
}

pub fn save_set(set: &SegmentationSet, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, set.to_bytes())?;
    Ok(())
}

pub fn load_set(path: &Path) -> Result<SegmentationSet, DataError> {
    SegmentationSet::from_bytes(&std::fs::read(path)?)
}
