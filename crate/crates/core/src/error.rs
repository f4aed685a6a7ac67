use thiserror::Error;

use crate::tiling::TileIdx;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Inconsistent partitioning, replication, or shape configuration.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("tile {tile} is outside the {rows}x{cols} tile grid")]
    TileOutOfGrid { tile: TileIdx, rows: usize, cols: usize },

    #[error("replica index {replica} is out of range (replication factor {factor})")]
    ReplicaOutOfRange { replica: usize, factor: usize },

    #[error("rank {caller} does not own tile {tile} of replica {replica}")]
    NotOwner {
        caller: usize,
        tile: TileIdx,
        replica: usize,
    },

    #[error("range [{lo},{hi}) is outside a segment of length {len}")]
    OutOfSegment { lo: usize, hi: usize, len: usize },

    #[error("rank {rank} is outside the fabric (p = {nprocs})")]
    RankOutOfRange { rank: usize, nprocs: usize },

    /// A caller-side precondition was violated (dimension mismatch, containment).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An API was used in an order it does not allow.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("exhaustive search refused: {ops} ops exceeds the bound of {bound}; use cost-greedy lowering")]
    SearchTooLarge { ops: usize, bound: usize },

    #[error("invalid IR program: {0}")]
    InvalidProgram(String),

    #[error("internal scheduling error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;
