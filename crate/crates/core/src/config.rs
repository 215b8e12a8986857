//! Run configuration: a single JSON document per run.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluators::{Cached, Evaluator, ExternalEvaluator, World, WorldParams};
use crate::optimizers::Algorithm;
use crate::space::{PrePrompt, SearchSpace, SpaceError};

pub const RUN_SCHEMA: &str = "eppo.run/v1";

fn default_timeout_ms() -> u64 {
    600_000
}

fn default_run_schema() -> String {
    RUN_SCHEMA.to_string()
}

/// Where scores come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvaluatorSpec {
    Synthetic {
        #[serde(default)]
        world: WorldParams,
    },
    /// A child process speaking the NDJSON protocol on stdin/stdout.
    Process {
        command: Vec<String>,
        n_demos: usize,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
    Tcp {
        addr: String,
        n_demos: usize,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

impl EvaluatorSpec {
    pub fn cardinality(&self) -> usize {
        match self {
            EvaluatorSpec::Synthetic { world } => world.n_demos,
            EvaluatorSpec::Process { n_demos, .. } | EvaluatorSpec::Tcp { n_demos, .. } => *n_demos,
        }
    }

    pub fn world(&self) -> Option<&WorldParams> {
        match self {
            EvaluatorSpec::Synthetic { world } => Some(world),
            _ => None,
        }
    }
}

/// A resolved evaluator. External backends are wrapped in a cache since
/// every `(1+1)` step re-submits the incumbent.
pub enum Backend {
    Synthetic(World),
    External(Cached<ExternalEvaluator>),
}

impl Backend {
    pub fn resolve(spec: &EvaluatorSpec) -> Result<Self, ConfigError> {
        Ok(match spec {
            EvaluatorSpec::Synthetic { world } => {
                Backend::Synthetic(World::new(world.clone()).map_err(ConfigError::World)?)
            }
            EvaluatorSpec::Process {
                command,
                n_demos,
                timeout_ms,
            } => {
                let (program, args) = command
                    .split_first()
                    .ok_or_else(|| ConfigError::Invalid("empty evaluator command".into()))?;
                let client = ExternalEvaluator::spawn(
                    program,
                    args,
                    *n_demos,
                    Duration::from_millis(*timeout_ms),
                )
                .map_err(|e| ConfigError::Connect(e.to_string()))?;
                Backend::External(Cached::new(client))
            }
            EvaluatorSpec::Tcp {
                addr,
                n_demos,
                timeout_ms,
            } => {
                let client =
                    ExternalEvaluator::connect(addr, *n_demos, Duration::from_millis(*timeout_ms))
                        .map_err(|e| ConfigError::Connect(e.to_string()))?;
                Backend::External(Cached::new(client))
            }
        })
    }

    pub fn evaluator(&self) -> &dyn Evaluator {
        match self {
            Backend::Synthetic(w) => w,
            Backend::External(e) => e,
        }
    }

    pub fn world(&self) -> Option<&World> {
        match self {
            Backend::Synthetic(w) => Some(w),
            Backend::External(_) => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported schema {found:?}, expected {expected:?}")]
    Schema { found: String, expected: &'static str },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("invalid search space: {0}")]
    Space(#[from] SpaceError),
    #[error("invalid world: {0}")]
    World(crate::evaluators::WorldError),
    #[error("cannot start evaluator: {0}")]
    Connect(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_run_schema")]
    pub schema: String,
    pub seed: u64,
    pub budget: u32,
    pub algorithm: Algorithm,
    pub shots: usize,
    pub evaluator: EvaluatorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<PrePrompt>,
    /// Re-score archived candidates before recommending (noisy evaluators).
    #[serde(default)]
    pub reevaluate: bool,
}

impl RunConfig {
    pub fn synthetic(seed: u64, budget: u32, algorithm: Algorithm, shots: usize, world: WorldParams) -> Self {
        Self {
            schema: RUN_SCHEMA.into(),
            seed,
            budget,
            algorithm,
            shots,
            evaluator: EvaluatorSpec::Synthetic { world },
            warm_start: None,
            reevaluate: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn space(&self) -> Result<SearchSpace, ConfigError> {
        Ok(SearchSpace::new(self.shots, self.evaluator.cardinality())?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema != RUN_SCHEMA {
            return Err(ConfigError::Schema {
                found: self.schema.clone(),
                expected: RUN_SCHEMA,
            });
        }
        if self.budget == 0 {
            return Err(ConfigError::Invalid("budget must be at least 1".into()));
        }
        let space = self.space()?;
        if let Some(w) = &self.warm_start {
            space
                .validate(w)
                .map_err(|v| ConfigError::Invalid(format!("warm_start: {v}")))?;
        }
        Ok(())
    }
}
