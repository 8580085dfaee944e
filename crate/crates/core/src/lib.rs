//! Learning dynamics of linear networks on hierarchical tasks and the
//! optimal constant solution (OCS) they pass through.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
mod error;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod ntk;
pub mod response;
pub mod spectral;
pub mod task_data;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
