//! Scoring backends behind a common [`Evaluator`] trait.

mod cache;
pub mod protocol;
mod world;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::Score;
use crate::space::PrePrompt;

pub use cache::Cached;
pub use protocol::ExternalEvaluator;
pub use world::{Question, World, WorldError, WorldParams, REPARTITION_BASE, TRUE_RISK_BASE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Exact-match outcome of one pre-prompt on one split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalReport {
    pub correct: u32,
    pub total: u32,
    /// Per-question outcomes when the backend provides them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_question: Option<Vec<bool>>,
}

impl EvalReport {
    pub fn from_outcomes(per_question: Vec<bool>) -> Self {
        Self {
            correct: per_question.iter().filter(|&&b| b).count() as u32,
            total: per_question.len() as u32,
            per_question: Some(per_question),
        }
    }

    /// Aggregate-only report; rejects `correct > total` and empty totals.
    pub fn aggregate(correct: u32, total: u32) -> Result<Self, EvalError> {
        if total == 0 || correct > total {
            return Err(EvalError::ScoreOutOfRange { correct, total });
        }
        Ok(Self {
            correct,
            total,
            per_question: None,
        })
    }

    pub fn score(&self) -> Score {
        Score {
            correct: self.correct,
            total: self.total,
        }
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("no response to request {id} within {timeout_ms} ms")]
    Timeout { id: u64, timeout_ms: u64 },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("score out of range: {correct}/{total}")]
    ScoreOutOfRange { correct: u32, total: u32 },
    #[error("evaluator reported an error: {0}")]
    Remote(String),
    #[error("evaluator connection closed")]
    Disconnected,
    #[error("i/o error talking to evaluator: {0}")]
    Io(String),
    #[error("demonstration index {index} outside [0, {cardinality})")]
    IndexOutOfRange { index: u32, cardinality: usize },
    #[error("empty pre-prompt")]
    EmptyPrePrompt,
}

impl EvalError {
    /// True for responses that arrived but violated the protocol, including
    /// scores outside `[0, total]`.
    pub fn is_malformed(&self) -> bool {
        matches!(self, EvalError::Malformed(_) | EvalError::ScoreOutOfRange { .. })
    }
}

/// A scoring backend. Implementations must be safe for concurrent read-only
/// use: the driver may evaluate the candidates of one comparison in parallel.
pub trait Evaluator: Send + Sync {
    /// Size of the demonstration set that pre-prompts index into.
    fn cardinality(&self) -> usize;

    fn evaluate(&self, pre: &PrePrompt, split: Split) -> Result<EvalReport, EvalError>;

    /// Whether evaluation is cheap enough to run on every step for progress
    /// curves.
    fn is_cheap(&self) -> bool {
        false
    }
}

impl<E: Evaluator + ?Sized> Evaluator for &E {
    fn cardinality(&self) -> usize {
        (**self).cardinality()
    }
    fn evaluate(&self, pre: &PrePrompt, split: Split) -> Result<EvalReport, EvalError> {
        (**self).evaluate(pre, split)
    }
    fn is_cheap(&self) -> bool {
        (**self).is_cheap()
    }
}

impl<E: Evaluator + ?Sized> Evaluator for Box<E> {
    fn cardinality(&self) -> usize {
        (**self).cardinality()
    }
    fn evaluate(&self, pre: &PrePrompt, split: Split) -> Result<EvalReport, EvalError> {
        (**self).evaluate(pre, split)
    }
    fn is_cheap(&self) -> bool {
        (**self).is_cheap()
    }
}

impl<E: Evaluator + ?Sized> Evaluator for Arc<E> {
    fn cardinality(&self) -> usize {
        (**self).cardinality()
    }
    fn evaluate(&self, pre: &PrePrompt, split: Split) -> Result<EvalReport, EvalError> {
        (**self).evaluate(pre, split)
    }
    fn is_cheap(&self) -> bool {
        (**self).is_cheap()
    }
}

/// Range check shared by backends.
pub(crate) fn check_indices(pre: &PrePrompt, cardinality: usize) -> Result<(), EvalError> {
    if pre.is_empty() {
        return Err(EvalError::EmptyPrePrompt);
    }
    match pre.indices().iter().find(|&&i| i as usize >= cardinality) {
        Some(&index) => Err(EvalError::IndexOutOfRange { index, cardinality }),
        None => Ok(()),
    }
}
