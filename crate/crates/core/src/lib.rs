//! Federated training of sparse mixture-of-experts models over intermittent
//! satellite-to-ground links.
//!
//! Devices are grouped into clusters that see a passing satellite one at a
//! time. Each cluster owns a subset of the experts; the satellite aggregates
//! those experts when the owning cluster is in view and aggregates the gate
//! every contact.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod channel;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod moe;
pub mod split;
pub mod tensor;

pub use error::{Error, Result};
