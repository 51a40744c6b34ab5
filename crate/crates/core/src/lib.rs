//! Deepfake video detection from fused behavioral, geometric and identity
//! descriptors.
//!
//! The pipeline runs in stages, each in its own module:
//!
//! * [`ingest`] turns frame sequences into 224×224 face crops and 478-point
//!   landmark sequences through pluggable backends.
//! * [`geometry`] computes 36 outer-face distances per frame.
//! * [`descriptor`] fuses 52 blendshape + 36 geometric + 512 identity values
//!   into 600-dim frame vectors and windows them into 120×600 slices.
//! * [`net`] is the SE-residual embedding network and the triplet margin loss.
//! * [`trainer`] builds triplets, trains the network and emits the reference set.
//! * [`inference`] classifies slices by nearest-neighbor vote against the
//!   reference set and aggregates them per video.
//! * [`eval`] holds split protocols, ACC/AUC/EER and experiment drivers.

pub mod artifact;
pub mod config;
pub mod descriptor;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod inference;
pub mod ingest;
pub mod manifest;
pub mod net;
pub mod pipeline;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};

/// Ground-truth or predicted class of a video or slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn is_fake(self) -> bool {
        matches!(self, Label::Fake)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "real" => Ok(Label::Real),
            "fake" => Ok(Label::Fake),
            other => Err(Error::InvalidConfig(format!("unknown label {other:?}"))),
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
