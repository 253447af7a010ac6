//! Batch-robust cell embeddings from frozen transformer encoders.
//!
//! The crate covers the whole desk-scale pipeline: sparse count ingestion,
//! QC and feature selection, doublet scoring, a frozen per-modality encoder,
//! a trainable adapter/fusion/refinement head with analytic gradients, a
//! Harmony-style baseline, annotation by voting and propagation, and the
//! integration metrics used to compare embeddings.

// `!(x > 0.0)` guards are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotate;
pub mod backbone;
pub mod cluster;
pub mod doublet;
pub mod error;
pub mod harmony;
pub mod io;
pub mod knn;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod prep;
pub mod synth;
pub mod train;

mod par;

pub use error::{Error, Result};
pub use io::{CellTable, Embeddings, ExpressionMatrix, Provenance};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used everywhere a seed is accepted.
pub type Rng = ChaCha8Rng;

pub(crate) fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
