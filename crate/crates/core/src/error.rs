use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("rank error in {op}: expected {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("refinement budget exhausted: t = {t}, k_max = {k_max}")]
    Budget { t: usize, k_max: usize },
    #[error("{logits} logit rows cannot align with {targets} target tokens")]
    Alignment { logits: usize, targets: usize },
    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: usize },
    #[error("{0} out of range")]
    Range(String),
    #[error("checkpoint version {found:?} is not supported (expected {expected:?})")]
    Version { found: String, expected: &'static str },
    #[error("malformed checkpoint at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: missing required field {field:?}")]
    Schema { line: usize, field: &'static str },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Short category name, used for the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } | Error::Rank { .. } => "shape",
            Error::Config(_) | Error::Range(_) | Error::Budget { .. } => "config",
            Error::TokenOutOfRange { .. } | Error::UnknownSymbol(_) => "vocabulary",
            Error::SequenceTooLong { .. } => "length",
            Error::DegenerateInput(_) => "input",
            Error::Alignment { .. } => "alignment",
            Error::NonFiniteLoss { .. } => "training",
            Error::Version { .. } | Error::Format { .. } => "checkpoint",
            Error::Parse { .. } | Error::Schema { .. } => "dataset",
            Error::Io(_) => "io",
        }
    }
}
