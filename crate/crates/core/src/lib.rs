#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod kernel;
pub mod linalg;
pub mod objectives;
pub mod rng;
pub mod surrogate;
pub mod federation;
pub mod harness;
