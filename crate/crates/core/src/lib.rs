//! Constructive piecewise Korn decompositions for 2D displacement fields with
//! cracks.
//!
//! A displacement field is sampled on an `n x n` grid over a square `Q_mu`
//! and carries a jump set made of closed segments. The crate builds dyadic
//! bad-square structures around the jump set, an auxiliary partition into
//! simply connected pieces, a Whitney-type covering, a partition-of-unity
//! smoothing, and finally a partition of the domain with one infinitesimal
//! rigid motion per piece. Level-set (coarea) partitions and the small-jump
//! truncation are provided as separate pipelines.

pub mod covering;
pub mod decompose;
pub mod field;
pub mod fixtures;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod partition;
pub mod report;
pub mod rigid;
pub mod smoothing;
pub mod verify;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KornError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate fit: {0}")]
    Degenerate(String),
    #[error("jump set too long for a single square; regularize first: {0}")]
    NeedsRegularization(String),
    #[error("covering invariant violated: {0}")]
    CoveringInvariant(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error("exceptional set stopped shrinking: {0}")]
    Stalled(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed field file: {0}")]
    Format(String),
}

pub use geometry::{Point, Segment, SegmentSet, Square, Theta};
pub use rigid::RigidMotion;
