//! Few-shot meta-representation learning on vector-embedded data.
//!
//! The crate covers the full label-inference pipeline: synthetic task
//! generation and no-replacement episode partitioning, a closed-form ridge
//! base learner, meta-training of a linear embedding through that solver,
//! constrained clustering that recovers global labels from local ones,
//! cross-entropy pre-training (optionally on rotation-augmented grids),
//! residual meta fine-tuning, and Monte-Carlo checks of the relationship
//! between global-label-selection risk and multi-class risk.

pub mod augmentation;
pub mod error;
pub mod io;
pub mod label_inference;
pub mod learners;
pub mod pipeline;
pub mod representation;
pub mod rng;
pub mod taskgen;
pub mod theory_eval;

pub use error::{MelaError, Result};
pub use learners::{GlobalClassifier, RidgeConfig, TaskClassifier};
pub use representation::{EmbeddingModel, LinearEmbedding, ResidualAdapter};
pub use taskgen::{FlatDataset, MetaDistribution, Record, Sample, Task};
