//! Image-text matching with concept-graph embeddings.
//!
//! Captions yield a concept vocabulary and a co-occurrence graph; a graph
//! convolution turns it into concept vectors shared by both modalities.
//! Images (region features) and sentences (word sequences) are encoded into
//! instance vectors, mixed with concept vectors by attention scores, and the
//! fused result is trained with a ranking loss plus a score-alignment term.
//!
//! The `examples/` directory walks through each stage; the `cvse` binary
//! exposes the same pipeline over files.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod consensus;
pub mod corpus;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod graph;
pub mod io;
pub mod model;
pub mod numeric;
pub mod objective;
pub mod synthetic;
pub mod train;

pub use error::{CvseError, Result};
