//! Physics-based single-particle cryo-EM simulation and evaluation.
//!
//! The crate covers the full synthetic-micrograph path and the metrics used
//! to score downstream models on it:
//!
//! 1. **Specimen layout** ([`specimen`]): particle counts, uniform SO(3)
//!    poses, and non-overlapping placement on the image plane.
//! 2. **Imaging** ([`optics`], [`synthesis`]): orthogonal projection of the
//!    density volumes, ice-thickness weight maps, CTF/PSF filtering, and
//!    detector-noise baselines at a target SNR.
//! 3. **Contrastive kernels** ([`contrastive`]): mask-guided patch sampling,
//!    the patch-wise NCE cross-entropy with analytic gradients, and the
//!    adversarial/total objective values.
//! 4. **Evaluation** ([`evalkit`], [`recon`]): pick matching and AUPRC,
//!    Fourier shell correlation and resolution thresholds, rotation
//!    alignment/error, and Fourier-slice back-projection from known poses.
//!
//! Grids are `f64` in memory and move through MRC2014 mode-2 (float32) files
//! via [`mrc`]. All randomized operations take an explicit RNG so that
//! datasets are reproducible and parallelizable with per-index streams.

pub mod contrastive;
pub mod evalkit;
pub(crate) mod fft;
pub mod mrc;
pub mod optics;
pub mod recon;
pub mod specimen;
pub mod synthesis;
pub mod volume;

pub use volume::{DensityVolume, Micrograph};

// Rotations in the public API are nalgebra matrices.
pub use nalgebra;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unsupported MRC mode {0}")]
    UnsupportedMrcMode(i32),
    #[error("truncated file: expected {expected} data bytes, found {found}")]
    TruncatedFile { expected: u64, found: u64 },
    #[error("non-cubic volume: {nx}x{ny}x{nz}")]
    NonCubicVolume { nx: i64, ny: i64, nz: i64 },
    #[error("not an MRC2014 file: {0}")]
    BadMrcHeader(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("image too small for one particle")]
    ImageTooSmall,
    #[error("bad conformation index {index} (have {count} conformations)")]
    BadConformationIndex { index: usize, count: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("infinite SNR: noise variance is zero")]
    InfiniteSnr,
    #[error("degenerate signal for Poisson scaling")]
    DegeneratePoissonSignal,
    #[error("mask has no {0} region")]
    EmptyMaskClass(&'static str),
    #[error("feature not normalized: norm {0} deviates from 1 by more than 1e-3")]
    FeatureNotNormalized(f64),
    #[error("probability {0} outside (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("alignment ill-conditioned")]
    AlignmentIllConditioned,
    #[error("patch out of bounds at position ({x}, {y}), layer {layer}")]
    PatchOutOfBounds { x: usize, y: usize, layer: usize },
    #[error("pose count mismatch: {0} vs {1}")]
    PoseCountMismatch(usize, usize),
    #[error("empty projection stack")]
    EmptyStack,
    #[error("annotation parse error at line {line}: {msg}")]
    AnnotationParse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
