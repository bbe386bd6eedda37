use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error("location {0} is already occupied")]
    OccupiedLocation(usize),
    #[error("object {0} is already placed")]
    AlreadyPlaced(usize),
    #[error("object {0} is not part of this episode")]
    UnknownObject(usize),
    #[error("location {0} is out of range")]
    UnknownLocation(usize),
    #[error("no vacant location available")]
    NoVacancy,
    #[error("token id {0} is outside the vocabulary")]
    TokenOutOfRange(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("label {0} is outside the vacant support")]
    LabelOutsideSupport(usize),
    #[error("model has no inductive-prior head")]
    PriorRequired,
    #[error("model was built with the inductive-prior head")]
    PriorNotSupported,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("malformed episode: {0}")]
    MalformedEpisode(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("session error: {0}")]
    Session(String),
    #[error("out of turn: {0}")]
    OutOfTurn(&'static str),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }

    /// Stable machine-readable name of the variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidSpec(_) => "invalid_spec",
            Error::OccupiedLocation(_) => "occupied_location",
            Error::AlreadyPlaced(_) => "already_placed",
            Error::UnknownObject(_) => "unknown_object",
            Error::UnknownLocation(_) => "unknown_location",
            Error::NoVacancy => "no_vacancy",
            Error::TokenOutOfRange(_) => "token_out_of_range",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::LabelOutsideSupport(_) => "label_outside_support",
            Error::PriorRequired => "prior_required",
            Error::PriorNotSupported => "prior_not_supported",
            Error::Divergence { .. } => "divergence",
            Error::MalformedEpisode(_) => "malformed_episode",
            Error::Config(_) => "config",
            Error::Session(_) => "session",
            Error::OutOfTurn(_) => "out_of_turn",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
