use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: left {left:?}, right {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("unknown concept id {id} (universe has {universe} concepts)")]
    UnknownConcept { id: usize, universe: usize },

    #[error("validation failed: {0}")]
    Validation(String),

    /// The student already sits at the mastery ceiling on the targets, so the
    /// learning effect is undefined. Callers resample the episode.
    #[error("degenerate episode: pre-path exam {exam_before} is at or above the ceiling {ceiling}")]
    DegenerateEpisode { exam_before: f64, ceiling: f64 },

    #[error("enumeration of {paths} paths exceeds the cap of {cap}")]
    EnumerationCap { paths: u128, cap: u64 },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        /// JSON dump of the offending batch.
        dump: String,
    },

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Config(_)
                | Error::UnknownConcept { .. }
                | Error::Domain(_)
                | Error::Precondition(_)
                | Error::Dimension { .. }
                | Error::EnumerationCap { .. }
                | Error::CheckpointVersion(_)
        )
    }
}
