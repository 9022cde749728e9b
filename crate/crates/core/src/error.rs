use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("subset enumeration needs d <= {max}, got d = {d}")]
    EnumerationGuard { d: usize, max: usize },

    #[error("no closed-form likelihood for {0} variants")]
    UnsupportedLikelihood(&'static str),

    #[error("training diverged at epoch {epoch}: loss = {loss} (last finite loss {last_finite})")]
    Divergence {
        epoch: usize,
        loss: f64,
        last_finite: f64,
    },

    #[error("energy rose at step {step}: {before:e} -> {after:e} (slack {slack:e})")]
    EnergyIncrease {
        step: usize,
        before: f64,
        after: f64,
        slack: f64,
    },

    #[error("energy {energy:e} at step {step} is below the lower bound {bound:e}")]
    BelowBound { step: usize, energy: f64, bound: f64 },

    #[error("IDX format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("IDX label file (magic 0x00000801) where an image file (0x00000803) was expected")]
    LabelFile,

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("malformed CSV: {0}")]
    Csv(String),

    #[error("experiment cell {cell} ({label}), run {run}: {source}")]
    Cell {
        cell: usize,
        label: String,
        run: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors raised by a violated numerical invariant rather than bad input.
    pub fn is_invariant_violation(&self) -> bool {
        match self {
            Error::EnergyIncrease { .. } | Error::BelowBound { .. } | Error::Divergence { .. } => {
                true
            }
            Error::Cell { source, .. } => source.is_invariant_violation(),
            _ => false,
        }
    }

    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Cell { source, .. } => source.is_io(),
            _ => false,
        }
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}

pub(crate) fn check_finite(what: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
