use thiserror::Error;

/// Errors produced while building or running integer models.
#[derive(Debug, Error)]
pub enum IrnnError {
    #[error("invalid quantization range [{min}, {max}]")]
    InvalidRange { min: f64, max: f64 },

    #[error("degenerate quantization range: min = max = 0{}", stage_suffix(.stage))]
    DegenerateRange { stage: Option<String> },

    #[error("unsupported bitwidth {0} (expected 8 or 16)")]
    UnsupportedBitwidth(u32),

    #[error("fixed-point multiplier out of range: {0}")]
    MultiplierOutOfRange(f64),

    #[error("number of PWL pieces must be in [1, {max}], got {got}")]
    InvalidPieces { got: usize, max: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("stage bitwidth mismatch at {stage}: expected {expected}-bit, got {got}-bit")]
    StageBitwidth { stage: String, expected: u32, got: u32 },

    #[error("shared quantization parameters differ: {0}")]
    SharedQParams(String),

    #[error("stages never observed during calibration: {}", .0.join(", "))]
    UnobservedStages(Vec<String>),

    #[error("degenerate calibration ranges at stages: {}", .0.join(", "))]
    DegenerateStages(Vec<String>),

    #[error("missing quantization parameters for stage {0}")]
    MissingQParams(String),

    #[error("token id {id} out of vocabulary (size {vocab})")]
    OutOfVocabulary { id: usize, vocab: usize },

    #[error("input sequence is empty")]
    EmptySequence,

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("unsupported format version {0} (expected 1)")]
    Version(u32),

    #[error("blob checksum mismatch")]
    Checksum,

    #[error("truncated blob: tensor {name} needs bytes {end} but blob has {len}")]
    TruncatedBlob { name: String, end: usize, len: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("manifest parse error: {0}")]
    Json(#[from] serde_json::Error),
}

fn stage_suffix(stage: &Option<String>) -> String {
    match stage {
        Some(s) => format!(" at stage {s}"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, IrnnError>;
