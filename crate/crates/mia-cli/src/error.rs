//! Error-to-exit-code mapping for the CLI.
//!
//! 0 ok, 2 config error, 3 upstream artifact missing, 4 gateway
//! failure, 5 invariant violation, 1 anything else (I/O and the like).

use std::fmt;
use std::path::Path;

use mia_core::adapter::AdapterError;
use mia_core::analysis::AnalysisError;
use mia_core::corpus::CorpusError;
use mia_core::embedding::EmbedError;
use mia_core::eval::EvalError;
use mia_core::gateway::GatewayError;
use mia_core::index::IndexError;
use mia_core::mindscape::MindscapeError;
use mia_core::ragflow::RagError;
use mia_core::silver::SilverError;
use mia_core::util::JsonlError;

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration; all violations listed at once.
    Config(Vec<String>),
    /// A required artifact from an earlier stage is absent.
    Upstream(String),
    /// The chat or embedding service failed after retries.
    Gateway(String),
    /// Data violated a pipeline invariant.
    Invariant(String),
    /// Plumbing failures (I/O and similar).
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Upstream(_) => 3,
            CliError::Gateway(_) => 4,
            CliError::Invariant(_) => 5,
            CliError::Other(_) => 1,
        }
    }

    /// Builds the exit-3 error for a missing stage input. `what` names
    /// the artifact ("corpus artifact", "mindscape artifact", ...);
    /// `producer` is the subcommand whose run would create it.
    pub fn missing(what: &str, path: &Path, producer: &str) -> CliError {
        CliError::Upstream(format!(
            "{what} missing: {} (run `mia {producer}` first)",
            path.display()
        ))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(violations) => {
                writeln!(f, "invalid configuration ({} problem(s)):", violations.len())?;
                for v in violations {
                    writeln!(f, "  - {v}")?;
                }
                Ok(())
            }
            CliError::Upstream(msg) => write!(f, "{msg}"),
            CliError::Gateway(msg) => write!(f, "gateway failure: {msg}"),
            CliError::Invariant(msg) => write!(f, "invariant violation: {msg}"),
            CliError::Other(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        CliError::Gateway(e.to_string())
    }
}

impl From<EmbedError> for CliError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::Transport(_) | EmbedError::ApiStatus { .. } | EmbedError::EmptyResponse => {
                CliError::Gateway(e.to_string())
            }
            other => CliError::Invariant(other.to_string()),
        }
    }
}

impl From<MindscapeError> for CliError {
    fn from(e: MindscapeError) -> Self {
        match e {
            MindscapeError::Gateway(g) => g.into(),
            MindscapeError::EmptyCompletion { .. } => CliError::Gateway(e.to_string()),
            MindscapeError::BudgetTooSmall { .. } => CliError::Config(vec![e.to_string()]),
            MindscapeError::Io { .. } => CliError::Other(e.to_string()),
            other => CliError::Invariant(other.to_string()),
        }
    }
}

impl From<SilverError> for CliError {
    fn from(e: SilverError) -> Self {
        match e {
            SilverError::Gateway(g) => g.into(),
            SilverError::Embed(em) => em.into(),
            other => CliError::Invariant(other.to_string()),
        }
    }
}

impl From<RagError> for CliError {
    fn from(e: RagError) -> Self {
        match e {
            RagError::Gateway(g) => g.into(),
            RagError::Embed(em) => em.into(),
            other => CliError::Invariant(other.to_string()),
        }
    }
}

impl From<IndexError> for CliError {
    fn from(e: IndexError) -> Self {
        CliError::Invariant(e.to_string())
    }
}

impl From<AdapterError> for CliError {
    fn from(e: AdapterError) -> Self {
        match e {
            AdapterError::InvalidConfig(_) => CliError::Config(vec![e.to_string()]),
            AdapterError::Io(_) => CliError::Other(e.to_string()),
            other => CliError::Invariant(other.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Jsonl(j) => j.into(),
            other => CliError::Invariant(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(_) => CliError::Other(e.to_string()),
            other => CliError::Invariant(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Io(_) => CliError::Other(e.to_string()),
            other => CliError::Invariant(other.to_string()),
        }
    }
}

impl From<JsonlError> for CliError {
    fn from(e: JsonlError) -> Self {
        match e {
            JsonlError::Io { .. } => CliError::Other(e.to_string()),
            other => CliError::Invariant(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}
