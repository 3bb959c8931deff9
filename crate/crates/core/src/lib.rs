//! Speaker recognition toolkit: conformer and ECAPA-style embedding
//! extractors, an additive-angular-margin training objective, training data
//! bookkeeping and trial-based equal-error-rate evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arch;
pub mod audio;
pub mod dataconfig;
pub mod error;
pub mod eval;
pub mod par;
pub mod pooling;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
