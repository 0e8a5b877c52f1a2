//! Dense 64-bit tensors with a reverse-mode tape.
//!
//! Graph structure never enters the tape as a dense matrix: neighbor
//! aggregation is `row_gather` → per-edge arithmetic → `segment_sum`.

mod matrix;
mod optim;
mod tape;

pub use matrix::Matrix;
pub use optim::{Adam, BoundParams, Param, ParamStore};
pub use tape::{OpKind, Tape, Var};
