//! Numerical verification of temporal-consistency, filtered DDIM inversion and
//! cross-attention alignment bounds on small synthetic problems.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod bilateral;
pub mod config;
pub mod ddim;
pub mod descent;
pub mod error;
pub mod harness;
pub mod report;
pub mod similarity;
pub mod temporal;
pub mod tensor;

#[cfg(test)]
mod oracle;

pub use config::{CheckId, SuiteConfig};
pub use error::{Error, Result};
pub use harness::run_suite;
pub use report::{Comparison, VerificationReport};
