use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("nondeterministic forward: two evaluations gave {first} and {second}")]
    Nondeterministic { first: f64, second: f64 },

    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenId { id: usize, size: usize },

    #[error("sequence of {len} positions exceeds the {max} available")]
    Overlength { len: usize, max: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("prompt: {0}")]
    Prompt(String),

    #[error("answer vocabulary: {0}")]
    AnswerVocab(String),

    /// Corruption selected no position even after resampling.
    #[error("sample has no loss positions")]
    SkipSample,

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f32 },

    #[error("frozen parameter `{0}` changed during training")]
    FrozenDrift(String),

    #[error("format: {0}")]
    Format(String),

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error("layer {layer} out of range for a model with {n_layers} layers")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
