use std::fmt;

use thiserror::Error;

/// A domain invariant did not hold.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invariant violated: {0}")]
pub struct InvariantViolation(String);

impl InvariantViolation {
    pub fn new(msg: String) -> Self {
        InvariantViolation(msg)
    }

    pub fn message(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error after {attempts} attempt(s): {detail}")]
    Transport { attempts: u32, detail: String },
    #[error("backend misbehaved: {0}")]
    Misbehavior(String),
    #[error("no utility score digit in verifier output {0:?}")]
    ScoreParse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend {backend} does not support {what}")]
    Unsupported { backend: String, what: String },
}

/// Where in a trajectory a backend call failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallSite {
    Speculate,
    Verify,
    Regenerate,
    Forced,
    Answer,
}

impl fmt::Display for CallSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CallSite::Speculate => "speculate",
            CallSite::Verify => "verify",
            CallSite::Regenerate => "regenerate",
            CallSite::Forced => "forced base step",
            CallSite::Answer => "answer",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine configuration: {0}")]
    Config(InvariantViolation),
    #[error("backend {backend} has the wrong role for {slot}")]
    RoleMismatch { backend: String, slot: &'static str },
    #[error("step {step} ({site}): {source}")]
    Backend {
        step: usize,
        site: CallSite,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Invariant(#[from] InvariantViolation),
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("problem {problem} has {found} samples, expected {expected}")]
    MissingSamples {
        problem: String,
        found: usize,
        expected: usize,
    },
    #[error("run sets differ: {0}")]
    MismatchedRunSets(String),
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}:{column}: {msg}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("override {key:?}: {msg}")]
    Override { key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<InvariantViolation> for ConfigError {
    fn from(v: InvariantViolation) -> Self {
        ConfigError::Invalid(v.message().to_string())
    }
}
