use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to identify the
/// failing stage without a debugger.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value produced by op `{op}` at tape node {node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("tensor is not attached to this tape")]
    NotOnTape,

    #[error("gradient target must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("incompatible layers: {detail}")]
    IncompatibleLayers { detail: String },

    #[error("label vector is not one-hot: {detail}")]
    NotOneHot { detail: String },

    #[error("ratio {0} outside [0, 1]")]
    InvalidRatio(f64),

    #[error("noise bound {0} must be finite and non-negative")]
    InvalidNoiseBound(f64),

    #[error("length mismatch: {context} has {got} entries, expected {expected}")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("attack infeasible: attacker view exposes no known coordinates")]
    AttackInfeasible,

    #[error("all {0} attack restarts aborted on non-finite losses")]
    AllRestartsAborted(usize),

    #[error("sensitivity budget exceeded: {inputs} inputs x {params} params = {cost} > {budget}")]
    BudgetExceeded {
        inputs: usize,
        params: usize,
        cost: u64,
        budget: u64,
    },

    #[error("cipher key mismatch: ciphertext under key {have}, requested {want}")]
    KeyMismatch { have: u64, want: u64 },

    #[error("ciphertext length mismatch: {a} vs {b}")]
    CipherLength { a: usize, b: usize },

    #[error("dataset record truncated at byte offset {offset} (record size {record})")]
    RecordTruncated { offset: usize, record: usize },

    #[error("invalid label {value} in record {record} (max {max})")]
    InvalidLabel {
        record: usize,
        value: u8,
        max: u8,
    },

    #[error("quadrature panel count {0} must be positive and even")]
    InvalidPanels(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("layer group {group} outside 1..={groups}")]
    InvalidLayerGroup { group: usize, groups: usize },

    #[error("malformed mask file: {0}")]
    MaskFormat(String),

    #[error("malformed trace file: {0}")]
    TraceFormat(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
