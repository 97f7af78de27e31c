//! Design optimization for SNAIL-based Josephson traveling-wave parametric
//! amplifiers.
//!
//! The crate is organized as a three-stage pipeline:
//!
//! 1. [`sweep`] runs linear simulations ([`network`]) over a uniform grid of
//!    device parameters and scores each configuration with a device metric
//!    ([`metric`]).
//! 2. [`bayesopt`] refines the search with a Gaussian-process surrogate
//!    ([`gp`]) and expected improvement, returning the best device `p*`.
//! 3. [`threewave`] integrates three-wave-mixing coupled-mode equations on the
//!    optimized line and picks the pump working point `q*` with the highest
//!    band-averaged gain.
//!
//! [`pipeline`] wires the stages together behind the `snailopt` command line
//! tool, with configuration, manifests and file export.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bayesopt;
pub mod config;
pub mod constants;
pub mod error;
pub mod gp;
pub mod manifest;
pub mod metric;
pub mod network;
pub mod pipeline;
pub mod snail;
pub mod sweep;
pub mod threewave;
pub mod touchstone;
mod util;

pub use error::{Error, Result};
pub use network::{CellConfig, DeviceParams, DispersionCurve, FrequencyGrid, TwoPortResponse};
pub use snail::{JunctionSpec, PotentialExpansion, SnailSpec};
