//! Few-shot visual anomaly detection on patch-token grids.
//!
//! A frozen vision backbone (run elsewhere) turns every image into a grid of
//! patch tokens. This crate treats that grid as a graph with 8-connectivity,
//! trains a masked graph-attention encoder on a handful of normal grids, and
//! scores query grids by how badly the encoder's output disagrees with the
//! projected input tokens (scaled cosine error).
//!
//! Pipeline:
//!
//! - [`tokenio`] reads and writes the binary token-grid container.
//! - [`graph`] builds the fixed grid topology.
//! - [`nn`] holds the numerical kernels (GEMM, activations, softmax, dropout, Adam).
//! - [`gat`] is the attention encoder with feature masking.
//! - [`align`] has the projection heads and the scaled cosine error.
//! - [`train`] runs the per-category training loop and checkpointing.
//! - [`score`] turns a query grid into patch, image and pixel scores.
//! - [`eval`] computes AUROC, average precision and PRO.
//! - [`synth`] generates ground-truthed synthetic grids.
//! - [`cli`] implements the `patchgat` commands.

pub mod align;
pub mod cli;
pub mod error;
pub mod eval;
pub mod gat;
pub mod graph;
pub mod nn;
pub mod pgm;
pub mod score;
pub mod synth;
pub mod tokenio;
pub mod train;

pub use error::{Error, Result};

/// The single deterministic random stream used for initialization, masking and dropout.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Builds a [`SeededRng`] from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}
