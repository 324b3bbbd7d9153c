//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A coordinate does not fit the curve's per-dimension precision.
    #[error("point {id}: coordinate {value} in dimension {dim} outside [0, 2^{bits})")]
    CurveRange {
        id: u64,
        dim: usize,
        value: i64,
        bits: u32,
    },

    /// A point handed to a build or update lies outside the index region.
    #[error("point {id} lies outside the index region")]
    OutOfRegion { id: u64 },

    #[error("id {0} not present in the index")]
    MissingId(u64),

    #[error("id {0} already present")]
    DuplicateId(u64),

    #[error("{path}: parse error at byte {offset}: {reason}")]
    Parse {
        path: String,
        offset: u64,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A structural audit found a node violating one of the documented
    /// invariants. `path` locates the node from the root.
    #[error("invariant violated at {path}: {detail}")]
    Audit { path: String, detail: String },
}
