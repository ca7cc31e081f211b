use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid measurement set: {0}")]
    InvalidMeasurements(String),

    #[error("invalid receiver pair ({k}, {l}) for {receivers} receivers")]
    InvalidPair {
        k: usize,
        l: usize,
        receivers: usize,
    },

    #[error("invalid pair index set: {0}")]
    InvalidPairSet(String),

    #[error("could not draw {sets} disjoint pair sets of size {size} from {receivers} receivers")]
    PairSetsUnsatisfiable {
        receivers: usize,
        sets: usize,
        size: usize,
    },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("source position coincides with receiver {0}")]
    SourceAtReceiver(usize),

    #[error("not enough candidates: need {needed}, have {available}")]
    TooFewCandidates { needed: usize, available: usize },

    #[error("measurement {0} carries no truth tag")]
    MissingTruth(usize),

    #[error("localization failed: {0}")]
    LocalizationFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
