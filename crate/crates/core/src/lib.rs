//! Gradual self-training for unsupervised domain adaptation under bounded
//! shift, with Wasserstein-infinity tooling, synthetic shift generators and a
//! verification harness for the accompanying counterexamples and bounds.

// `!(x > 0.0)` is used on purpose since it also rejects NaN; index loops
// over paired arrays read better than zipped iterators here.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod distributions;
pub mod error;
pub mod experiment;
pub mod models;
pub mod optimize;
pub mod par;
pub mod rng;
pub mod selftrain;
pub mod shiftgen;
pub mod theory;
pub mod wasserstein;

pub use error::{Error, Result};
