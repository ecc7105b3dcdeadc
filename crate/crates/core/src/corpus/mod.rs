//! Reports, images and the datasets built from them.

mod io;
mod stats;
mod synthetic;
mod tokenize;
mod vocab;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use io::{load_corpus, read_image, save_corpus, write_image, IMAGE_MAGIC};
pub use stats::{compute_stats, CorpusStats, SplitStats};
pub use synthetic::{generate_synthetic, render_report, render_views, sentence, split_for, synthetic_findings, EntityFinding, FindingState, SyntheticConfig};
pub use tokenize::tokenize;
pub use vocab::{Vocabulary, BOS, EOS, PAD, UNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split tag {other:?}"))),
        }
    }
}

/// Row-major `H × W × F` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageView {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl ImageView {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Format(format!("empty image {height}x{width}x{channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Format(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Format(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn blank(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub images: Vec<ImageView>,
    pub report: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// SHA-256 over ids, splits, reports and raw pixel bits, in sample order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update(s.id.as_bytes());
            h.update([0]);
            h.update(s.split.as_str().as_bytes());
            h.update([0]);
            h.update(s.report.as_bytes());
            h.update([0]);
            for img in &s.images {
                for dim in [img.height, img.width, img.channels] {
                    h.update((dim as u32).to_le_bytes());
                }
                for p in &img.pixels {
                    h.update(p.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Fails on an empty report or a sample with zero or more than two views.
    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            if s.report.trim().is_empty() {
                return Err(Error::Format(format!("sample {} has an empty report", s.id)));
            }
            if s.images.is_empty() || s.images.len() > 2 {
                return Err(Error::Format(format!("sample {} has {} views; expected 1 or 2", s.id, s.images.len())));
            }
        }
        Ok(())
    }
}
