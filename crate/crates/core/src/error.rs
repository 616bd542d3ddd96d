use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("beta out of range: beta_start={beta_start}, beta_end={beta_end}")]
    BetaOutOfRange { beta_start: f64, beta_end: f64 },

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("invalid timestep pair: t={t}, t_prev={t_prev}")]
    Timestep { t: usize, t_prev: usize },

    #[error("no inference steps")]
    NoInferenceSteps,

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("denoiser: {0}")]
    Denoiser(String),

    #[error("non-finite null-text loss at step {step} (t={t})")]
    NonFiniteLoss { step: usize, t: usize },

    #[error("class phrase absent from prompt: {0:?}")]
    PhraseAbsent(String),

    #[error("degenerate histogram")]
    DegenerateHistogram,

    #[error("attention record is empty")]
    EmptyRecord,

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("object {index} ({class:?}): {source}")]
    Object {
        index: usize,
        class: String,
        #[source]
        source: Box<Error>,
    },

    #[error("object {index} has no mask and no attention source is available")]
    MissingMask { index: usize },

    #[error("unbound denoiser {0:?}")]
    UnboundDenoiser(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn for_object(self, index: usize, class: &str) -> Error {
        Error::Object {
            index,
            class: class.to_string(),
            source: Box::new(self),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, message: impl ToString) -> Error {
        Error::File {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
