//! Modelling, simulation and stability analysis of DC microgrids whose
//! sources share power through a consensus protocol.

// Comparisons are written so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod controllers;
pub mod error;
pub mod linalg;
pub mod loadmodel;
pub mod lyapunov;
pub mod netmodel;
pub mod scenario;
pub mod simulator;

pub use error::{GridError, Result};
