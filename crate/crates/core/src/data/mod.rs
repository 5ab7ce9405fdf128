//! Signature images, synthetic writers, pair construction and disk I/O.

mod io;
mod pairs;
mod synth;

pub use io::{load_dir, load_png_image, read_manifest, save_dataset, save_png, write_manifest, LoadIssue, Manifest};
pub use pairs::{build_pairs, Pair, PairSet, Split};
pub use synth::{gen_writer, render, WriterStyle};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Model canvas height in pixels.
pub const CANVAS_HEIGHT: usize = 96;
/// Model canvas width in pixels.
pub const CANVAS_WIDTH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kind {
    Genuine,
    Forged,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Genuine => "genuine",
            Kind::Forged => "forged",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "genuine" => Some(Kind::Genuine),
            "forged" => Some(Kind::Forged),
            _ => None,
        }
    }
}

/// Single-channel image with ink-bright pixels in `[0, 1]` (background 0).
#[derive(Debug, Clone, PartialEq)]
pub struct SigImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub writer: u32,
    pub kind: Kind,
    pub sample: u32,
}

impl SigImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(dim_err!(
                "{} pixels do not fill a {height}x{width} image",
                pixels.len()
            ));
        }
        if pixels.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::Contract("pixels must be finite and within [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            pixels,
            writer: 0,
            kind: Kind::Genuine,
            sample: 0,
        })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
            writer: 0,
            kind: Kind::Genuine,
            sample: 0,
        }
    }

    pub fn with_identity(mut self, writer: u32, kind: Kind, sample: u32) -> Self {
        self.writer = writer;
        self.kind = kind;
        self.sample = sample;
        self
    }

    /// The image as a `[1, 1, H, W]` batch.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.pixels.clone())
            .expect("image extents are positive")
    }

    /// Same identity, new pixels (clamped to `[0, 1]`).
    pub fn with_pixels(&self, pixels: &[f64]) -> Self {
        assert_eq!(pixels.len(), self.pixels.len());
        Self {
            pixels: pixels.iter().map(|p| p.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// Fraction of pixels carrying any ink.
    pub fn coverage(&self) -> f64 {
        self.pixels.iter().filter(|&&p| p > 0.0).count() as f64 / self.pixels.len() as f64
    }

    pub fn mean_abs_diff(&self, other: &SigImage) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.pixels.len() as f64
    }

    pub fn l2_distance(&self, other: &SigImage) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// A collection of signature images plus the seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub images: Vec<SigImage>,
}

impl Dataset {
    /// Deterministic synthetic dataset: `writers` writers, each with
    /// `genuine` own samples and `forged` samples by a dedicated forger.
    pub fn synthetic(writers: usize, genuine: usize, forged: usize, seed: u64) -> Result<Self> {
        if writers == 0 {
            return Err(Error::Config("at least one writer is required".into()));
        }
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let writer_seeds: Vec<u64> = (0..writers).map(|_| master.random()).collect();
        let mut images = Vec::with_capacity(writers * (genuine + forged));
        for (w, &wseed) in writer_seeds.iter().enumerate() {
            let style = gen_writer(wseed);
            for (kind, count) in [(Kind::Genuine, genuine), (Kind::Forged, forged)] {
                for s in 0..count {
                    let sample_seed = derive_seed(wseed, kind, s as u64);
                    let img = render(&style, kind, sample_seed)?;
                    images.push(img.with_identity(w as u32, kind, s as u32));
                }
            }
        }
        Ok(Self {
            height: CANVAS_HEIGHT,
            width: CANVAS_WIDTH,
            seed,
            images,
        })
    }

    pub fn writers(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.images.iter().map(|i| i.writer).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn indices_of(&self, writer: u32, kind: Kind) -> Vec<usize> {
        self.images
            .iter()
            .enumerate()
            .filter(|(_, im)| im.writer == writer && im.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }
}

fn derive_seed(base: u64, kind: Kind, sample: u64) -> u64 {
    let tag = match kind {
        Kind::Genuine => 0x9E37_79B9_7F4A_7C15u64,
        Kind::Forged => 0xC2B2_AE3D_27D4_EB4Fu64,
    };
    base ^ tag.wrapping_mul(sample + 1)
}
