//! Labeled image inventory, stratified splitting and the input pipeline.

mod augment;
mod image;
mod manifest;
mod split;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::augment::{apply as apply_augmentation, augment, mirror_horizontal, translate, AugmentDraw, AugmentationConfig};
pub use self::image::{bilinear_resize_plane, load_and_resize, ImageDims, ImageTensor};
pub use self::manifest::{scan_dataset, CxrRecord, DatasetManifest, LabelLayout, ScanReport};
pub use self::split::{stratified_split, Split, SplitAssignment, SplitRatios};

pub type DatasetResult<T> = Result<T, DatasetError>;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset root {0} does not exist")]
    MissingRoot(PathBuf),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("label file {path}: {msg}")]
    LabelFile { path: PathBuf, msg: String },
    #[error("duplicate {field} in manifest: {value}")]
    Duplicate { field: &'static str, value: String },
    #[error("invalid record {id}: {msg}")]
    InvalidRecord { id: String, msg: String },
    #[error("class {class} has {count} images; a stratified split needs at least 4")]
    ClassTooSmall { class: Label, count: usize },
    #[error("invalid split ratios {0:?}: must be positive and sum to 1")]
    InvalidRatios([f64; 3]),
    #[error("split does not match manifest: {0}")]
    SplitMismatch(String),
    #[error("cannot decode {path}: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("target dimensions {height}x{width} have zero area")]
    ZeroArea { height: usize, width: usize },
    #[error("invalid augmentation config: {0}")]
    InvalidAugmentation(String),
}

/// Ground-truth class of a radiograph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Healthy,
    Tb,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Healthy, Label::Tb];

    /// Class index used by the classifier head: healthy = 0, tb = 1.
    pub fn index(self) -> usize {
        match self {
            Label::Healthy => 0,
            Label::Tb => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Healthy),
            1 => Some(Label::Tb),
            _ => None,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Tb
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Healthy => "healthy",
            Label::Tb => "tb",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "healthy" | "normal" | "0" => Ok(Label::Healthy),
            "tb" | "tuberculosis" | "abnormal" | "1" => Ok(Label::Tb),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// Which collection an image came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Indian,
    Shenzhen,
    #[default]
    Other,
}

impl std::str::FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "indian" => Ok(Source::Indian),
            "shenzhen" => Ok(Source::Shenzhen),
            "other" => Ok(Source::Other),
            other => Err(format!("unknown source {other:?}")),
        }
    }
}
