//! Joint stain-domain translation and epithelium segmentation.
//!
//! The crate is `no_std` (with `alloc`) so the numerical core can be embedded
//! anywhere; the `std` feature only enables runtime CPU feature detection in
//! the matrix kernels. File formats and the command line live in the
//! companion `stainseg` crate.
//!
//! Module map:
//! * [`datamodel`]: patches, label masks, posteriors, one-hot encoding.
//! * [`ck`]: heuristic epithelium labeling of CK-like images and the
//!   three-class mask conditioning.
//! * [`graph`]: the reverse-mode autodiff engine everything trains on.
//! * [`nn`]: mask-conditioned generators and dual-head discriminators.
//! * [`losses`]: adversarial, cycle, segmentation and combined objectives.
//! * [`train`]: alternating optimization, baselines, model selection.
//! * [`eval`]: tiled inference, F1, tumor-cell scoring, concordance.
//! * [`synth`]: procedural two-domain data with exact ground truth.

#![cfg_attr(not(feature = "std"), no_std)]
// Negated float comparisons deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod ck;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod nn;
pub mod scalar;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;
