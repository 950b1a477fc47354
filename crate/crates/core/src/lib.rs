//! Content lifecycle simulator for short-video feeds.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod behavior;
pub mod domain;
pub mod embeddings;
pub mod experiments;
pub mod io;
pub mod metrics;
pub mod serving;
pub mod sim;
