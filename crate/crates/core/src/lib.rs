//! Desk-scale deep-learning stack for grayscale lung-image classification
//! benchmarks: an f64 tensor library with reverse-mode differentiation, four
//! model families (plain CNN, residual CNN, mini vision transformer and a
//! probability-averaging ensemble), deterministic augmentation, SGD-momentum
//! training and a one-vs-rest evaluation suite (ROC/AUC, confusion matrix,
//! F1/MCC/Dice).
//!
//! Everything is seed-driven and bitwise reproducible: identical seeds and
//! inputs give identical floats, with or without the `parallel` feature.

pub mod data;
pub mod metrics;
pub mod models;
pub mod train;
pub mod seeding;
pub mod tensor;

pub use tensor::{Graph, Tensor, TensorError, TensorId};
