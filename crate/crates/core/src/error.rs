//! Crate-wide error type.

use thiserror::Error;

use crate::types::NodeId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {message}")]
    Parse { path: String, message: String },

    #[error("priors validation failed: {0}")]
    InvalidPriors(String),

    #[error("unknown label '{0}'")]
    UnknownLabel(String),

    #[error("unknown node {0}")]
    UnknownNode(NodeId),

    #[error("node {0} is not a furniture node")]
    NotFurniture(NodeId),

    #[error("scene sampling failed in room '{room}': {message}")]
    Sampling { room: String, message: String },

    #[error("scene graph is inconsistent: {0}")]
    InvalidScene(String),

    #[error("memory operation failed: {0}")]
    Memory(String),

    #[error("model configuration or state error: {0}")]
    Model(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    Training {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("no path from {from:?} to furniture {furniture}")]
    Unreachable { from: (usize, usize), furniture: NodeId },

    #[error("{0}")]
    InvalidConfig(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), message: message.into() }
    }
}
