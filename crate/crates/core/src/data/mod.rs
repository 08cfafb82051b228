//! Dataset handling: grayscale PGM I/O, manifest files, the augmentation
//! pipeline and a synthetic image generator for benchmark runs.

mod augment;
mod manifest;
mod pgm;
mod synthetic;

pub use augment::{adjust_illumination, augment, rotate, zoom, AugmentConfig};
pub use manifest::{load_manifest, split_view, write_manifest, DatasetManifest, ManifestEntry};
pub use pgm::{load_pgm, normalize, save_pgm};
pub use synthetic::{generate_synthetic, SplitCounts};

use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: i/o error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a binary PGM (magic {found:?}, expected \"P5\")")]
    PgmBadMagic { path: PathBuf, found: String },
    #[error("{path}: unsupported PGM maxval {maxval} (expected 255)")]
    PgmBadMaxval { path: PathBuf, maxval: u32 },
    #[error("{path}: malformed PGM header")]
    PgmBadHeader { path: PathBuf },
    #[error("{path}: truncated PGM: header promises {expected} pixel bytes, found {actual}")]
    PgmTruncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("pixel value {value} outside [0, 255]")]
    RawPixelOutOfRange { value: f64 },
    #[error("pixel value {value} outside [0, 1]")]
    PixelOutOfRange { value: f64 },
    #[error("image must be square, got {h}x{w}")]
    NotSquare { h: usize, w: usize },
    #[error("image tensor must have shape [1 x H x W], got {shape:?}")]
    BadImageShape { shape: Vec<usize> },
    #[error("manifest line {line}: unknown label {value:?} (expected Cancer|Pneumonia|Tuberculosis|Fibrosis|Normal)")]
    UnknownLabel { line: usize, value: String },
    #[error("manifest line {line}: unknown split {value:?} (expected train|validation|test)")]
    UnknownSplit { line: usize, value: String },
    #[error("manifest line {line}: duplicate path {path}")]
    DuplicatePath { line: usize, path: String },
    #[error("manifest line {line}: missing image file {path}")]
    MissingFile { line: usize, path: PathBuf },
    #[error("manifest {path}: bad header {found:?} (expected \"path,label,split\")")]
    ManifestBadHeader { path: PathBuf, found: String },
    #[error("manifest {path}: {source}")]
    ManifestCsv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("zoom factor must be positive, got {factor}")]
    NonPositiveZoom { factor: f64 },
    #[error("augment config invalid: {reason}")]
    BadAugmentConfig { reason: String },
    #[error("synthetic side must be at least 16, got {side}")]
    SideTooSmall { side: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The five class labels, in the fixed reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    Cancer,
    Pneumonia,
    Tuberculosis,
    Fibrosis,
    Normal,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 5] = [
        ClassLabel::Cancer,
        ClassLabel::Pneumonia,
        ClassLabel::Tuberculosis,
        ClassLabel::Fibrosis,
        ClassLabel::Normal,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ClassLabel::Cancer => "Cancer",
            ClassLabel::Pneumonia => "Pneumonia",
            ClassLabel::Tuberculosis => "Tuberculosis",
            ClassLabel::Fibrosis => "Fibrosis",
            ClassLabel::Normal => "Normal",
        }
    }

    /// Position in [`ClassLabel::ALL`]; doubles as the model class index.
    pub fn index(&self) -> usize {
        ClassLabel::ALL.iter().position(|l| l == self).unwrap()
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        ClassLabel::ALL.iter().copied().find(|l| l.as_str() == s).ok_or(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
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
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Split::ALL.iter().copied().find(|v| v.as_str() == s).ok_or(())
    }
}

/// One labeled grayscale image with pixels in [0, 1], shape [1 x H x W],
/// H == W.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Tensor,
    pub label: ClassLabel,
    pub split: Split,
}

impl ImageSample {
    pub fn new(id: String, pixels: Tensor, label: ClassLabel, split: Split) -> Result<Self, DataError> {
        let shape = pixels.shape();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(DataError::BadImageShape { shape: shape.to_vec() });
        }
        if shape[1] != shape[2] {
            return Err(DataError::NotSquare { h: shape[1], w: shape[2] });
        }
        if let Some(&bad) = pixels.data().iter().find(|&&p| !(0.0..=1.0).contains(&p)) {
            return Err(DataError::PixelOutOfRange { value: bad });
        }
        Ok(ImageSample { id, pixels, label, split })
    }

    pub fn side(&self) -> usize {
        self.pixels.shape()[1]
    }
}
