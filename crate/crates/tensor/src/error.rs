use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite gradient for parameter `{param}` at optimizer step {step}")]
    NonFinite { param: String, step: u64 },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
