//! Information-bottleneck knowledge distillation for embedding models.
//!
//! A large frozen teacher provides target embeddings; a small student MLP
//! learns to (1) retain what the teacher knows, via a contrastive InfoNCE
//! bound with a learnable alignment head, while (2) shedding incidental
//! detail of the raw inputs, via an HSIC dependence penalty between inputs
//! and student embeddings. Training runs in two stages — unlabeled
//! distillation, then supervised fine-tuning on (anchor, positive, hard
//! negatives) triplets with an optional dimension-reducing projection.
//!
//! The crate is organized by role:
//! - [`linalg`]: dense row-major matrices and the finite-difference oracle,
//! - [`kernels`]: linear / RBF / inverse-multiquadric Gram matrices and
//!   Gram centering,
//! - [`objectives`]: HSIC, both InfoNCE losses, the combined stage losses,
//!   and their analytic gradients,
//! - [`encoder`]: the student MLP with manual backprop, projection head,
//!   frozen-teacher interface, and binary checkpoints,
//! - [`trainer`]: run configuration, Adam, gradient clipping, and the two
//!   training stages,
//! - [`evalsuite`]: Spearman, MRR@k, Recall@k, alignment/uniformity, the
//!   covariance diagnostic, and exact brute-force retrieval,
//! - [`dataio`]: embedding file formats and the seeded synthetic task
//!   generator,
//! - [`error`]: the crate-wide error type.
//!
//! Everything is deterministic given a seed: same configuration and data
//! produce bit-identical models, embeddings, and files.

pub mod dataio;
pub mod encoder;
pub mod error;
pub mod evalsuite;
pub mod kernels;
pub mod linalg;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
