//! Regional contrastive consistency regularization (RCCR) for unsupervised
//! domain-adaptive semantic segmentation.
//!
//! The crate trains a student/teacher segmentation pair on a labeled source
//! domain and an unlabeled target domain. On top of the usual cross-entropy
//! and ClassMix consistency losses it adds a region-wise contrastive loss
//! over the overlap rectangle of a CutMix composite: the student embedding of
//! each overlap cell is pulled toward the teacher embedding of the same cell
//! on the clean target image and pushed away from embeddings at every other
//! cell, optionally extended with a FIFO memory bank of negatives from recent
//! batches.
//!
//! Everything runs on the CPU in `f64` so that the numerical contracts
//! (scalar reference oracle, finite-difference gradient checks, bit-exact
//! checkpoint resume) can be verified at desk scale. See the `book/`
//! directory for a guided tour, and `rccr selftest` for the built-in
//! verification suites.

pub mod core;
pub mod mixing;
pub mod models;
pub mod contrastive;
pub mod membank;
pub mod data;
pub mod eval;
pub mod trainer;
pub mod cli;

pub use crate::core::{
    EmbeddingGrid, FeatureGrid, ImageTensor, LabelMap, ProbMap, RngHandle, IGNORE,
};

// The mdbook chapters double as doc-tests so the guide can never drift from
// the public API. `cargo test --doc` compiles and runs every fenced snippet.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/contrastive-loss.md")]
    mod contrastive_loss {}
    #[doc = include_str!("../../../book/src/sampling-and-memory.md")]
    mod sampling_and_memory {}
    #[doc = include_str!("../../../book/src/benchmark-and-eval.md")]
    mod benchmark_and_eval {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli_chapter {}
}
