//! Context-prior late fusion for multi-label emotion regression.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: a small define-by-run reverse-mode engine.
//! - [`stats`]: co-occurrence counts and the conditional tables `P⁺`/`P⁻`.
//! - [`fusion`]: stream projection, max-pooled presence estimate `Q`,
//!   probabilistic pooling and the fusion rules.
//! - [`loss`]: tempered softmax, tempered cross-entropy and squared error.
//! - [`model`]: the multi-stream network, SGD training and ablations.
//! - [`metrics`]: R², AP, ROC-AUC, F1, ERS and KDE entropy / mutual information.
//! - [`data`]: dataset schema, JSONL I/O, stratified splits and the synthetic
//!   generator.

pub mod autodiff;
pub mod checks;
pub mod data;
pub mod error;
pub mod fusion;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Number of discrete emotion categories.
pub const N_DISCRETE: usize = 26;
/// Number of continuous affect dimensions (valence, arousal, dominance).
pub const N_CONTINUOUS: usize = 3;
/// Full label width.
pub const N_TARGETS: usize = N_DISCRETE + N_CONTINUOUS;

pub const DISCRETE_EMOTIONS: [&str; N_DISCRETE] = [
    "Peace",
    "Affection",
    "Esteem",
    "Anticipation",
    "Engagement",
    "Confidence",
    "Happiness",
    "Pleasure",
    "Excitement",
    "Surprise",
    "Sympathy",
    "Doubt/Confusion",
    "Disconnection",
    "Fatigue",
    "Embarrassment",
    "Yearning",
    "Disapproval",
    "Aversion",
    "Annoyance",
    "Anger",
    "Sensitivity",
    "Sadness",
    "Disquietment",
    "Fear",
    "Pain",
    "Suffering",
];

pub const CONTINUOUS_DIMENSIONS: [&str; N_CONTINUOUS] = ["Valence", "Arousal", "Dominance"];
