//! Training-free transformer depth pruning.
//!
//! A contiguous span of transformer blocks is replaced by a single d×d
//! linear transform, estimated from calibration activations and folded
//! into the preceding block's MLP down-projection — so the pruned model
//! keeps its architecture, just with fewer blocks.
//!
//! The flow, end to end:
//!
//! 1. [`selection`] scores every candidate span by the hidden-state
//!    distance between its input and output and picks the cut.
//! 2. [`model::forward_with_capture`] records the activations framing the
//!    span over a calibration set ([`calib`]).
//! 3. [`solvers`] estimate the transform: closed-form least squares,
//!    ridge, diagonal- or orthogonal-constrained variants, or Adam on a
//!    per-token cosine objective.
//! 4. [`model::TransformerModel::fuse_and_prune`] folds the transform into
//!    the surviving weights; [`pipeline`] verifies the fused model against
//!    an explicit-transform reference and reports metrics ([`eval`]).
//!
//! Everything is deterministic in (inputs, seeds): with the `parallel`
//! feature (default) the per-sequence, per-candidate and per-chunk work
//! runs on rayon but is reassembled in index order, so parallel and
//! sequential builds produce bitwise-identical results.

pub mod calib;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod parallel;
pub mod pipeline;
pub mod selection;
pub mod solvers;
mod wire;

pub use error::{Error, Result};
