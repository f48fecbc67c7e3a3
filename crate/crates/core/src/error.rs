use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("sample `{sample}`: invalid field `{field}`: {reason}")]
    Schema {
        sample: String,
        field: String,
        reason: String,
    },
    #[error("sample `{sample}`: dangling reference to document `{doc}` segment {index}")]
    DanglingReference {
        sample: String,
        doc: String,
        index: usize,
    },
    #[error("coreference annotation: {0}")]
    Annotation(String),
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("embedding provider: {0}")]
    Provider(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("label out of range: {0}")]
    Label(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
}
