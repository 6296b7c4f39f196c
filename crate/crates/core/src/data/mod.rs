//! Multi-domain datasets: procedural generation, a portable binary format,
//! stratified splitting, resizing and per-domain normalization.

mod format;
mod manifest;
mod normalize;
mod resize;
mod split;
mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use format::{
    from_bytes as dataset_from_bytes, read_dataset, to_bytes as dataset_to_bytes, write_dataset, DATASET_MAGIC, DATASET_VERSION,
};
pub use manifest::{DomainManifest, SplitFile};
pub use normalize::{normalize, NormStats};
pub use resize::{resize_shorter_side, Image};
pub use split::{split, SplitFractions};
pub use synth::{contact_sheet, generate_domain, write_png, ContentFamily, DomainSpec, Jitter, StyleParams};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("not a dataset file: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u32),
    #[error("dataset truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("dataset checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("{family:?} supports at most {max} classes, {requested} requested")]
    CapacityExceeded { family: ContentFamily, max: usize, requested: usize },
    #[error("class {class} has {count} samples; splitting needs at least 3")]
    TooFewSamples { class: usize, count: usize },
    #[error("normalization statistics missing for domain {0}")]
    MissingStats(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

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

/// Labelled 8-bit images, `N x C x H x W`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u16>,
    pub split: Option<Split>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        pixels: Vec<u8>,
        labels: Vec<u16>,
    ) -> Result<Self, DataError> {
        let ds = Self { channels, height, width, pixels, labels, split: None, provenance: String::new() };
        ds.check()?;
        Ok(ds)
    }

    pub(crate) fn check(&self) -> Result<(), DataError> {
        if self.pixels.len() != self.len() * self.image_len() {
            return Err(DataError::Invalid(format!(
                "{} labels but {} pixels for {}x{}x{} images",
                self.labels.len(),
                self.pixels.len(),
                self.channels,
                self.height,
                self.width
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let len = self.image_len();
        &self.pixels[i * len..(i + 1) * len]
    }

    /// Number of samples per label, indexed by label.
    pub fn class_histogram(&self) -> Vec<usize> {
        let classes = self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let mut h = vec![0; classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// A new dataset holding the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
            provenance: self.provenance.clone(),
        }
    }

    /// Concatenates datasets of identical image geometry.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset, DataError> {
        let first = parts.first().ok_or_else(|| DataError::Invalid("nothing to concatenate".into()))?;
        let mut out = Dataset { pixels: Vec::new(), labels: Vec::new(), ..(*first).clone() };
        for p in parts {
            if (p.channels, p.height, p.width) != (first.channels, first.height, first.width) {
                return Err(DataError::Invalid("cannot concatenate datasets of different image sizes".into()));
            }
            out.pixels.extend_from_slice(&p.pixels);
            out.labels.extend_from_slice(&p.labels);
        }
        Ok(out)
    }
}
