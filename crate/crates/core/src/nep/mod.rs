//! The node-edge predictor: a small transformer that scores a query's
//! candidate location edges from memory features.
//!
//! `model` holds the architecture and forward pass, `train` the optimizer and
//! training loop, and `checkpoint` a versioned binary parameter container.

pub mod checkpoint;
pub mod model;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{forward, forward_candidates, NepConfig, NepParams, QueryScores};
pub use train::{train, train_step, Adam, TrainConfig};
