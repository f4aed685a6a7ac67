//! Universal one-sided distributed matrix multiplication over a simulated
//! symmetric-memory fabric.
//!
//! Matrices are tiled and placed on logical processes by a
//! [`tiling::PartitionSpec`], optionally replicated. Each process generates
//! local multiply ops for the tiles of one stationary operand
//! ([`opgen`]), and the [`runtime`] executes them with one-sided gets and
//! accumulates. Op lists can instead be lowered to an explicit
//! communication IR ([`lowering`]) scored by a roofline [`costmodel`].

pub mod costmodel;
pub mod dense;
pub mod distmatrix;
pub mod error;
pub mod fabric;
pub mod lowering;
pub mod opgen;
pub mod runtime;
pub mod tiling;

pub use dense::{reference_gemm, Matrix};
pub use distmatrix::DistributedMatrix;
pub use error::{Error, Result};
pub use fabric::{AccumulateMode, Fabric, Rank};
pub use opgen::{MatMulOperands, Stationarity};
pub use tiling::{PartitionSpec, Shape2D};
