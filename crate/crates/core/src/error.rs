use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("fully masked attention row {row}")]
    FullyMaskedRow { row: usize },

    #[error("degenerate feature vector (zero norm)")]
    DegenerateVector,

    #[error("unimodal input: all {0} values identical")]
    Unimodal(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("layer {0} is not a decoder layer")]
    NotDecoderLayer(usize),

    #[error("mask requested before any denoising step (image {image}, subject {subject})")]
    NoRecordings { image: usize, subject: usize },

    #[error("negative cross-attention entry {value} at patch {patch}")]
    NegativeMap { patch: usize, value: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("step {step}{}: {source}", image.map(|i| format!(", image {i}")).unwrap_or_default())]
    Step {
        step: usize,
        image: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error("anchor mismatch: {0}")]
    Anchor(String),

    #[error("prompt set {set}: {message}")]
    PromptSet { set: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Yaml(#[from] serde_yaml::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn at_step(self, step: usize, image: Option<usize>) -> Self {
        match self {
            e @ Error::Step { .. } => e,
            other => Error::Step {
                step,
                image,
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
