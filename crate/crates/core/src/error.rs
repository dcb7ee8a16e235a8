use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset id {0:?}: must be nonempty and contain no whitespace")]
    InvalidDatasetId(String),
    #[error("dataset {0:?} declared more than once")]
    DuplicateDataset(String),
    #[error("dataset {dataset:?} lists class {name:?} more than once")]
    DuplicateClass { dataset: String, name: String },
    #[error("unknown source class {name:?} in dataset {dataset:?}")]
    UnknownSourceClass { dataset: String, name: String },
    #[error("source class {name:?} of dataset {dataset:?} appears in more than one merge group")]
    OverlappingMergeGroups { dataset: String, name: String },
    #[error("merge group joins two classes of the same dataset {0:?}")]
    WithinDatasetMerge(String),
    #[error("merge group has fewer than two members")]
    TrivialMergeGroup,
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("unknown hybrid class index {0}")]
    UnknownClass(usize),

    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("non-positive box extent: {0}")]
    NonPositiveBox(String),
    #[error("line {line}: expected {expected} boxes, found {found}")]
    CountMismatch { line: usize, expected: usize, found: usize },
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("inverted box: {0}")]
    InvertedBox(String),
    #[error("unknown image id {0}")]
    UnknownImage(u64),

    #[error("anchor config must contain at least one level, ratio and scale")]
    EmptyConfig,
    #[error("invalid anchor config: {0}")]
    InvalidAnchorConfig(String),
    #[error("negative threshold {neg} exceeds positive threshold {pos}")]
    ThresholdOrder { pos: f64, neg: f64 },
    #[error("image size must be positive, got {0}x{1}")]
    InvalidImageSize(f64, f64),

    #[error("non-finite logit at anchor {anchor}, class {class}")]
    NonFiniteLogit { anchor: usize, class: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("ground truth of class {0} lacks difficulty tags")]
    MissingDifficultyTags(usize),

    #[error("class {0} is not labeled by any dataset")]
    InvalidPolicy(usize),
    #[error("training diverged at step {step}: loss = {loss}")]
    DivergedLoss { step: usize, loss: f64 },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
