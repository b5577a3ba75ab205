//! Localized latent updates on frozen joint image/text embeddings.
//!
//! An affine adapter per side is trained on a few labeled images, and its
//! effect is blended into the frozen embedding only near the data it was
//! trained on. See `README.md` for the command-line tool.

pub mod adapter;
pub mod cluster;
pub mod error;
pub mod eval;
pub mod featio;
pub mod gradcheck;
pub mod graph;
pub mod locality;
pub mod rng;
pub mod synth;
pub mod train;
pub mod vector;

pub use adapter::AffineAdapter;
pub use error::{LluError, Result};
pub use graph::{Adapters, ForwardBatch, Gradients, LossConfig, Temperature};
pub use locality::{AnchorSet, MaskConfig};
pub use vector::{
    cosine_sim, harmonic_mean, normalize, ClassEmbeddingSet, FeatureRecord, FeatureSet, Metrics,
    UnitVector,
};
