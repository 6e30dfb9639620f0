//! Differential privacy analysis of discrete-time linear systems and
//! synthesis of privacy-preserving tracking controllers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimation;
pub mod gridlab;
pub mod hinf_sdp;
pub mod linalg;
pub mod linsys;
pub mod nonlinear;
pub mod observability;
pub mod privacy;
pub mod synthesis;

pub use error::{Error, Result};
pub use linsys::StateSpace;
