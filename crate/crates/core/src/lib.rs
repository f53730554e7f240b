//! Trajectory representation learning on road networks.
//!
//! The crate covers the full pipeline from raw data to evaluated embeddings:
//!
//! * [`roadnet`] — road-network model: segments, adjacency, feature vectors.
//! * [`trajdata`] — trajectory records, dataset splits, synthetic generation.
//! * [`masking`] — road-aware and random key/mask splits for pretraining.
//! * [`numcore`] — dense tensors, reverse-mode autodiff, AdamW, grad checking.
//! * [`embedding`] — spatial (graph attention), temporal, and user encodings.
//! * [`seq2seq`] — masked encoder/decoder with time-distance attention bias.
//! * [`training`] — pretraining loop, fine-tuning heads, loss bookkeeping.
//! * [`checkpoint`] — bit-exact model serialization.
//! * [`simbaselines`] — classical point-sequence similarity measures.
//! * [`evaluation`] — retrieval and regression/classification metrics.
//!
//! Everything is CPU-only, deterministic under a fixed seed, and sized for
//! desk-scale experiments (thousands of trajectories, graphs with a few
//! hundred segments).

pub mod checkpoint;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod masking;
pub mod numcore;
pub mod roadnet;
pub mod seq2seq;
pub mod simbaselines;
pub mod trajdata;
pub mod training;

pub use error::{Error, Result};
