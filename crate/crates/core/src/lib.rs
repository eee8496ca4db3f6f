//! Emergent communication about spatial relations between two objects:
//! scene generation, Speaker/Listener agents, the referential game,
//! language metrics, the relational gridworld and transfer experiments.

pub mod agents;
pub mod csvlog;
pub mod gridworld;
pub mod metrics;
pub mod refgame;
pub mod registry;
pub mod rng;
pub mod scene;
pub mod transfer;

use scene::Combination;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown {kind} '{name}' (available: {available})")]
    UnknownName { kind: &'static str, name: String, available: String },
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("could not place objects for {}", .0.label())]
    PlacementFailure(Combination),
    #[error("candidate pool of {pool} combinations cannot supply {needed} distinct candidates")]
    PoolTooSmall { pool: usize, needed: usize },
    #[error("config error at '{path}': {message}")]
    Config { path: String, message: String },
    #[error("checkpoint has {found} but {expected} was expected")]
    CheckpointMismatch { expected: String, found: String },
    #[error(transparent)]
    Nn(#[from] relcomm_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Qualifies a config error's path with the section it came from.
    pub fn at(self, section: &str) -> Error {
        match self {
            Error::Config { path, message } => Error::Config { path: format!("{section}.{path}"), message },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
