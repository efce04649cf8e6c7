//! polarlab: a laboratory for matrix-structured optimizer updates.
//!
//! The crate implements three optimizers (AdamW, Muon, PolarAdamW), exact
//! and Newton-Schulz polar maps in full and emulated-bf16 precision,
//! multiplicity-block machinery for equivariant weight matrices, a
//! conjugation (gauge) audit over a battery of matrix shapes, and a small
//! SO(3)-equivariant point-cloud regression testbed for comparing the
//! optimizers under identical data and initialization.
//!
//! Everything is deterministic given a master seed: random streams are
//! derived per task label, linear algebra runs sequentially, and output
//! files are byte-reproducible on a given build.

pub mod cli;
pub mod error;
pub mod gauge_audit;
pub mod matcore;
pub mod optim;
pub mod polar;
pub mod schur;
pub mod so3;

pub use error::{Error, Result};
