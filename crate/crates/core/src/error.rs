//! Error taxonomy shared by all analysis stages.
//!
//! Variants are grouped by how a caller should react: configuration errors
//! mean the request itself is malformed, missing-artifact errors mean an
//! upstream stage has not produced its output yet, and numeric errors mean a
//! computation produced something unusable (non-finite loss, degenerate
//! similarity input, an attention row that lost probability mass).

use thiserror::Error;

/// Unified error type for corpus generation, the model, and every analysis.
#[derive(Debug, Error)]
pub enum Error {
    /// The requested configuration is internally inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// A required upstream artifact (corpus, checkpoint, bank, report) is
    /// absent. `producer` names the stage that would create it.
    #[error("missing artifact `{path}` (produced by `{producer}`)")]
    MissingArtifact { path: String, producer: String },

    /// A numeric computation failed; the message carries the site and values.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A corpus cell could not be filled within the leakage-filter budget.
    #[error("cell unsatisfiable after {attempts} filtered attempts: class={class} n={n} template_index={template_index}")]
    UnsatisfiableCell {
        class: usize,
        n: usize,
        template_index: usize,
        attempts: usize,
    },

    /// Probe training was asked to fit classes that cannot be stratified.
    #[error("classes with fewer than 2 members cannot be cross-validated: {0:?}")]
    TooFewPerClass(Vec<usize>),

    /// Deserialization or file-format problems in persisted artifacts.
    #[error("artifact format error in `{path}`: {message}")]
    Format { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Convenience constructor for [`Error::Config`].
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Convenience constructor for [`Error::Numeric`].
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Convenience constructor for [`Error::MissingArtifact`].
    pub fn missing(path: impl Into<String>, producer: impl Into<String>) -> Self {
        Error::MissingArtifact {
            path: path.into(),
            producer: producer.into(),
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn messages_name_the_failing_piece() {
        let e = Error::missing("runs/x/bank", "capture");
        assert!(e.to_string().contains("runs/x/bank"));
        assert!(e.to_string().contains("capture"));

        let e = Error::UnsatisfiableCell {
            class: 3,
            n: 8,
            template_index: 41,
            attempts: 64,
        };
        let msg = e.to_string();
        assert!(msg.contains("class=3") && msg.contains("n=8") && msg.contains("41"));
    }
}
