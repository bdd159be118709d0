//! Bag-of-Deep-Visual-Words (BoDVW) image representation and classification.
//!
//! The pipeline turns an image into a fixed-length descriptor in four stages:
//! pooling-layer feature maps from a frozen VGG16 network, per-position
//! normalization of the depth vectors, vector quantization against a k-means
//! codebook, and a normalized visual-word histogram. An RBF-kernel SVM
//! classifies the descriptors. The `eval` module drives the full experimental
//! protocol (stratified splits, repeated runs, ablations) and the `cli` module
//! exposes everything as subcommands.

pub mod cli;
pub mod cnn;
pub mod codebook;
pub mod encoder;
mod error;
pub mod eval;
pub mod features;
pub mod imageio;
pub mod svm;

pub use error::{Error, Result};

/// Denominator guard added to every norm before dividing, so that zero
/// vectors map to zero instead of raising a division error.
pub const NORM_EPSILON: f64 = 0.000_000_08;

/// Identifies the fixed preprocessing recipe (bilinear resize to 224x224,
/// BGR channel order, per-channel mean subtraction, no rescaling). Embedded
/// in cache keys and reports so artifacts from other recipes never mix.
pub const PREPROCESSING_TAG: &str = "bilinear224-bgr-caffemean-v1";

/// Which of the two pipeline variants to run.
///
/// The two variants differ in exactly three steps: the per-vector norm
/// applied to raw depth vectors, the norm applied to the final histogram,
/// and nothing else. The histogram counting stage is shared bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Proposed pipeline: L2 per depth vector, L2 on the final histogram.
    Bodvw,
    /// Baseline pipeline: L1 per depth vector, L1 on the final histogram.
    DcfBovw,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Bodvw => "bodvw",
            Variant::DcfBovw => "dcf_bovw",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "bodvw" => Ok(Variant::Bodvw),
            "dcf_bovw" | "dcf-bovw" | "dcfbovw" => Ok(Variant::DcfBovw),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected bodvw or dcf_bovw)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Version string embedded in output artifacts.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
