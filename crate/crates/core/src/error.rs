use thiserror::Error;

use crate::curve_tree::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0:?}")]
    InvalidTopology(Vec<Violation>),

    #[error("invalid point index (curve {curve}, t {t})")]
    InvalidIndex { curve: usize, t: f64 },

    #[error("invalid index set: {0}")]
    InvalidIndexSet(String),

    #[error("rooted kernel evaluated at negative input ({0}, {1})")]
    NegativeInput(f64, f64),

    #[error("rooting transform needs base(0,0) > 0, got {0}")]
    DegenerateKernel(f64),

    #[error("matrix is not positive semi-definite even after jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("point projects onto the principal plane (w = {0:e})")]
    DegenerateProjection(f64),

    #[error("degenerate viewing ray")]
    DegenerateRay,

    #[error("{0} has no pixels")]
    EmptyClass(&'static str),

    #[error("foreground mask is empty")]
    EmptyMask,

    #[error("skeleton is disconnected ({0} components)")]
    DisconnectedSkeleton(usize),

    #[error("degenerate structure: {0}")]
    Structure(String),

    #[error("matching is empty")]
    EmptyMatching,

    #[error("importance sampling failed: {0}")]
    Sampling(String),

    #[error("optimisation failed: {0}")]
    Optimisation(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_stage(self, stage: impl Into<String>) -> Error {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}
