//! Structure-preserving model reduction for nonlinear port-Hamiltonian systems.
//!
//! Pipeline: simulate a full-order model ([`integrate`]), build projection bases
//! from snapshots or from tangential interpolation of the linearization
//! ([`basis`]), project while keeping the port-Hamiltonian form ([`reduce`]),
//! optionally replace the nonlinear gradient by a symmetric DEIM surrogate
//! ([`deim`]), and compare against a-priori error bounds ([`bounds`]).

// `!(x > y)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod bounds;
pub mod deim;
pub mod error;
pub mod integrate;
pub mod linalg;
pub mod models;
pub mod phcore;
pub mod reduce;

pub use error::{PhError, Result};
