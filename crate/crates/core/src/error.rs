use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] autograd::Error),
    #[error("text has {tokens} tokens but at most {max} fit between BOS and EOS")]
    TooLong { tokens: usize, max: usize },
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("normalizer has not been fitted")]
    UnfittedNormalizer,
    #[error("missing artifact {artifact}; run `{stage}` first")]
    MissingStage { stage: &'static str, artifact: String },
    #[error("output directory is locked by another run ({0})")]
    Locked(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}
