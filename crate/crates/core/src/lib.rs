//! Simulation and prediction of object locations in dynamic household scene
//! graphs.
//!
//! The crate covers the full loop of an embodied agent living in a procedurally
//! generated house:
//!
//! * [`priors`] loads a probabilistic knowledge graph over rooms, furniture,
//!   and objects (where object classes tend to be located).
//! * [`scenegraph`] defines concrete scenes as trees of house, floor, room,
//!   furniture, and object nodes, plus partial observations of them.
//! * [`sim`] perturbs the priors into per-environment distributions, samples
//!   scenes from them, and evolves scenes step by step (objects move, appear,
//!   and disappear).
//! * [`sgm`] accumulates partial observations into a scene-graph memory and
//!   turns candidate location edges into feature vectors.
//! * [`policies`] implements baseline location-prediction policies, including
//!   a beta-binomial Bayesian one.
//! * [`tensor`] is a small reverse-mode autodiff engine over dense `f64`
//!   matrices, and [`nep`] builds the transformer-based Node Edge Predictor on
//!   top of it.
//! * [`eval`] runs the three benchmark tasks (predict location, relative
//!   likelihood, find object), collects training datasets, and aggregates
//!   metrics.
//! * [`gridworld`] embodies the find-object task on a 2D grid with BFS
//!   navigation and rendering.
//!
//! Everything is deterministic: any run is a pure function of its
//! configuration and a single `u64` seed, with sub-streams derived via
//! [`seed`].

pub mod error;
pub mod eval;
pub mod gridworld;
pub mod nep;
pub mod policies;
pub mod priors;
pub mod scenegraph;
pub mod seed;
pub(crate) mod serde_util;
pub mod sgm;
pub mod sim;
pub mod tensor;
pub mod types;

pub use error::{Error, Result};
