use thiserror::Error;

use crate::policy::PromptId;

/// Errors raised by the training laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("prompt {id} is not indexed by this policy ({count} prompts)")]
    UnknownPrompt { id: PromptId, count: usize },

    #[error("invalid response: {0}")]
    InvalidResponse(String),

    #[error("behavior log-probability {0} cannot form an importance ratio")]
    RatioOverflow(f64),

    #[error("response space of {size} sequences exceeds the enumeration limit of {limit}")]
    ResponseSpaceTooLarge { size: u128, limit: u128 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("gradient contains non-finite values")]
    NonFiniteGradient,

    #[error("group size {0} is too small; at least 2 responses are required")]
    GroupTooSmall(usize),

    #[error("mean {mean} is not a multiple of 1/{group_size}")]
    NotGridMean { mean: f64, group_size: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64, dump: Box<serde_json::Value> },

    #[error("variance floor violated for prompt {prompt} in subset {subset}: {variance} < {floor}")]
    FloorViolation {
        prompt: PromptId,
        subset: &'static str,
        variance: f64,
        floor: f64,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
