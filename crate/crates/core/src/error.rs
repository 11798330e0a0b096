use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("token {token} out of range for k={k}")]
    TokenOutOfRange { token: u32, k: u8 },
    #[error("overlap check requires s < k")]
    NotOverlapping,
    #[error("invalid (s,k) parameters: {0}")]
    InvalidParams(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tape is stale: parameters changed since the forward pass")]
    StaleTape,
    #[error("context length {got} does not match model context length {expected}")]
    ContextLengthMismatch { expected: usize, got: usize },
    #[error("checksum mismatch: {0}")]
    ChecksumMismatch(String),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("model flag set but logits missing: {0}")]
    MissingLogits(&'static str),
    #[error("batch mismatch: {0}")]
    BatchMismatch(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("codestream exhausted")]
    StreamExhausted,
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("container was written with a static public model, but none was supplied")]
    SpumMissing,
    #[error("corrupt stream: {0}")]
    CorruptStream(String),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("chunk table inconsistent: {0}")]
    TableInconsistent(String),
    #[error("training corpus is empty")]
    CorpusEmpty,
    #[error("target has {got} tokens, need at least {needed}")]
    TargetTooShort { needed: usize, got: usize },
    #[error("source size is zero")]
    EmptySource,
    #[error("total time is zero")]
    ZeroTime,
    #[error("empty list")]
    EmptyList,
    #[error("verification failed: {0}")]
    VerificationFailed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}
