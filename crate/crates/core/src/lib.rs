//! Occupancy and backwards-flow prediction at continuous query points in
//! bird's-eye-view driving scenes.
//!
//! The crate covers the whole pipeline: synthetic scenes with exact label
//! oracles ([`scene`]), model inputs ([`encode`]), a small reverse-mode
//! autodiff kernel ([`nncore`]), the implicit decoder with learned attention
//! offsets and an explicit grid baseline ([`model`]), training ([`train`]),
//! metrics ([`eval`]), decoder benchmarks ([`bench`]) and the `occflow`
//! command line ([`cli`]).

// `!(x > 0.0)` is the NaN-rejecting form used by validators.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod geom;
pub mod scene;
pub mod encode;
pub mod nncore;
pub mod model;
pub mod train;
pub mod eval;
pub mod bench;
pub mod cli;
