//! Deviation bounds for comparison-based search, and a Monte Carlo check of
//! them against the synthetic world.
//!
//! A single pre-prompt's train/true deviation exceeds `eps` with probability
//! at most `2 exp(-2 T eps^2)`. A run whose recommendation is a function of
//! `b` symbols from a `kappa`-letter alphabet can recommend at most
//! `kappa^b` pre-prompts, so the union bound multiplies by `kappa^b`.
//! Random search recommends one of its `b` draws, hence `b`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::driver::{run, RunError};
use crate::evaluators::{EvalError, World, WorldError, WorldParams};
use crate::optimizers::Algorithm;
use crate::rng::derive_stream;
use crate::space::{SearchSpace, SpaceError};

pub const BOUNDS_SCHEMA: &str = "eppo.bounds/v1";
pub const MC_SCHEMA: &str = "eppo.mc/v1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoundError {
    #[error("T must be at least 1")]
    NoQuestions,
    #[error("epsilon must be finite and non-negative, got {0}")]
    Epsilon(f64),
    #[error("delta must be finite and non-negative, got {0}")]
    Delta(f64),
    #[error("kappa and b must be at least 1")]
    Channel,
    #[error("bound undefined: kappa^-b * delta / 2 = exp({0}) is not below 1")]
    Undefined(f64),
}

fn check_delta(delta: f64) -> Result<(), BoundError> {
    if delta.is_finite() && delta >= 0.0 {
        Ok(())
    } else {
        Err(BoundError::Delta(delta))
    }
}

/// `2 exp(-2 T eps^2)`.
pub fn hoeffding_delta(t: u64, eps: f64) -> Result<f64, BoundError> {
    if t == 0 {
        return Err(BoundError::NoQuestions);
    }
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(BoundError::Epsilon(eps));
    }
    Ok(2.0 * (-2.0 * t as f64 * eps * eps).exp())
}

/// Union bound over `m` events; unclamped.
pub fn bonferroni(m: u64, delta: f64) -> f64 {
    m as f64 * delta
}

/// `ln(kappa^b * delta)`; `-inf` when `delta == 0`.
pub fn ln_eppo_bound(kappa: u64, b: u64, delta: f64) -> f64 {
    b as f64 * (kappa as f64).ln() + delta.ln()
}

/// `kappa^b * delta`. Computed directly while `kappa^b` is representable,
/// otherwise through the log domain (and then possibly `inf`).
pub fn eppo_bound(kappa: u64, b: u64, delta: f64) -> f64 {
    let direct = i32::try_from(b)
        .ok()
        .map(|b| (kappa as f64).powi(b))
        .filter(|p| p.is_finite());
    match direct {
        Some(p) => p * delta,
        None => ln_eppo_bound(kappa, b, delta).exp(),
    }
}

/// `b * delta`.
pub fn rs_bound(b: u64, delta: f64) -> f64 {
    bonferroni(b, delta)
}

/// Bound for the whole archive of a `kappa`-ary run: `kappa^(b+1) * delta`.
pub fn unif_archive_bound(kappa: u64, b: u64, delta: f64) -> f64 {
    eppo_bound(kappa, b + 1, delta)
}

/// Smallest `eps` such that the recommendation of a `kappa`-ary run of
/// budget `b` deviates by more than `eps` with probability at most `delta`:
/// `sqrt(-ln(kappa^-b * delta / 2) / (2 T))`.
pub fn epsilon_bound(kappa: u64, b: u64, delta: f64, t: u64) -> Result<f64, BoundError> {
    if kappa == 0 || b == 0 {
        return Err(BoundError::Channel);
    }
    if t == 0 {
        return Err(BoundError::NoQuestions);
    }
    if !(delta.is_finite() && delta > 0.0) {
        return Err(BoundError::Delta(delta));
    }
    let ln_arg = (delta / 2.0).ln() - b as f64 * (kappa as f64).ln();
    if ln_arg > 0.0 {
        return Err(BoundError::Undefined(ln_arg));
    }
    Ok((-ln_arg / (2.0 * t as f64)).sqrt())
}

/// A probability bound, raw and clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prob {
    /// `null` in JSON when it overflows.
    pub raw: f64,
    pub ln: f64,
    pub clamped: f64,
    /// True when the raw value is at least 1, i.e. the bound says nothing.
    pub vacuous: bool,
}

impl Prob {
    pub fn new(raw: f64, ln: f64) -> Self {
        Self {
            raw,
            ln,
            clamped: raw.clamp(0.0, 1.0),
            vacuous: raw >= 1.0,
        }
    }

    fn from_raw(raw: f64) -> Self {
        Self::new(raw, raw.ln())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub schema: String,
    pub kappa: u64,
    pub budget: u64,
    pub t: u64,
    pub epsilon: f64,
    /// Deviation probability of one fixed pre-prompt.
    pub delta_single: Prob,
    pub delta_eppo: Prob,
    pub delta_rs: Prob,
    pub delta_unif_archive: Prob,
    /// Confidence level used for `epsilon_bound`.
    pub delta_target: f64,
    /// `None` when undefined for these parameters.
    pub epsilon_bound: Option<f64>,
}

impl BoundReport {
    pub fn compute(
        kappa: u64,
        budget: u64,
        t: u64,
        epsilon: f64,
        delta_target: f64,
    ) -> Result<Self, BoundError> {
        if kappa == 0 || budget == 0 {
            return Err(BoundError::Channel);
        }
        check_delta(delta_target)?;
        let single = hoeffding_delta(t, epsilon)?;
        Ok(Self {
            schema: BOUNDS_SCHEMA.into(),
            kappa,
            budget,
            t,
            epsilon,
            delta_single: Prob::from_raw(single),
            delta_eppo: Prob::new(
                eppo_bound(kappa, budget, single),
                ln_eppo_bound(kappa, budget, single),
            ),
            delta_rs: Prob::from_raw(rs_bound(budget, single)),
            delta_unif_archive: Prob::new(
                unif_archive_bound(kappa, budget, single),
                ln_eppo_bound(kappa, budget + 1, single),
            ),
            delta_target,
            epsilon_bound: epsilon_bound(kappa, budget, delta_target, t).ok(),
        })
    }

    /// Aligned two-column table.
    pub fn to_table(&self) -> String {
        let prob = |p: &Prob| {
            format!(
                "{:<14.6e} clamped {:.6}{}",
                p.raw,
                p.clamped,
                if p.vacuous { "  (vacuous)" } else { "" }
            )
        };
        let rows = [
            ("kappa", self.kappa.to_string()),
            ("budget", self.budget.to_string()),
            ("T", self.t.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("delta_single", prob(&self.delta_single)),
            ("delta_eppo", prob(&self.delta_eppo)),
            ("delta_rs", prob(&self.delta_rs)),
            ("delta_unif_archive", prob(&self.delta_unif_archive)),
            (
                "epsilon_bound",
                match self.epsilon_bound {
                    Some(e) => format!("{e:.6} at delta {}", self.delta_target),
                    None => format!("undefined at delta {}", self.delta_target),
                },
            ),
        ];
        rows.iter()
            .map(|(k, v)| format!("{k:<20}{v}\n"))
            .collect()
    }
}

/// What is recommended in each Monte Carlo replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "algorithm")]
pub enum McSubject {
    /// One random pre-prompt, drawn once and scored on every training set.
    Fixed,
    /// The recommendation of a full run on each training set.
    Run(Algorithm),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McScenario {
    pub seed: u64,
    /// `n_train` is the training-set size `T` of every replicate.
    pub world: WorldParams,
    pub subject: McSubject,
    pub shots: usize,
    /// Ignored for [`McSubject::Fixed`].
    pub budget: u32,
    pub epsilon: f64,
    pub replicates: u64,
    /// Fresh questions used to estimate the expected exact match.
    pub true_questions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub schema: String,
    pub replicates: u64,
    pub violations: u64,
    pub empirical_violation_rate: f64,
    pub delta_single: f64,
    pub bound: Prob,
    pub mc_stderr: f64,
    /// `rate <= clamped bound + 3 stderr`.
    pub consistent: bool,
}

#[derive(Debug, Error)]
pub enum McError {
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Run(#[from] Box<RunError>),
    #[error("at least one replicate is required")]
    NoReplicates,
}

/// Runs `replicates` independent training sets (disjoint re-partitions of one
/// world) and counts how often `|train EM - expected EM| > eps` for the
/// subject's recommendation.
pub fn mc_validate(sc: &McScenario) -> Result<McReport, McError> {
    if sc.replicates == 0 {
        return Err(McError::NoReplicates);
    }
    let world = World::new(sc.world.clone())?;
    let t = sc.world.n_train;
    let delta_single = hoeffding_delta(t as u64, sc.epsilon)?;
    let space = SearchSpace::new(sc.shots, sc.world.n_demos)?;

    let flags: Vec<bool> = match sc.subject {
        McSubject::Fixed => {
            let pre = space.sample(&mut derive_stream(sc.seed, b"mc-fixed"));
            let truth = world.eval_true(&pre, sc.true_questions)?;
            (0..sc.replicates)
                .into_par_iter()
                .map(|r| {
                    let em = world.repartition(r, t).eval_train(&pre)?.accuracy();
                    Ok((em - truth).abs() > sc.epsilon)
                })
                .collect::<Result<_, EvalError>>()?
        }
        McSubject::Run(alg) => (0..sc.replicates)
            .into_par_iter()
            .map(|r| -> Result<bool, McError> {
                let w = world.repartition(r, t);
                let cfg = RunConfig::synthetic(
                    crate::rng::derive_seed(sc.seed, b"mc-run", r),
                    sc.budget,
                    alg,
                    sc.shots,
                    sc.world.clone(),
                );
                let res = run(&cfg, &w).map_err(Box::new)?;
                let truth = w.eval_true(&res.recommendation, sc.true_questions)?;
                Ok((res.recommendation_score.value() - truth).abs() > sc.epsilon)
            })
            .collect::<Result<_, _>>()?,
    };

    let violations = flags.iter().filter(|&&f| f).count() as u64;
    let rate = violations as f64 / sc.replicates as f64;
    let bound = match sc.subject {
        McSubject::Fixed => Prob::from_raw(delta_single),
        McSubject::Run(Algorithm::RandomSearch) => {
            Prob::from_raw(rs_bound(sc.budget as u64, delta_single))
        }
        McSubject::Run(alg) => {
            let k = alg.kappa() as u64;
            Prob::new(
                eppo_bound(k, sc.budget as u64, delta_single),
                ln_eppo_bound(k, sc.budget as u64, delta_single),
            )
        }
    };
    let stderr = (rate * (1.0 - rate) / sc.replicates as f64).sqrt();
    Ok(McReport {
        schema: MC_SCHEMA.into(),
        replicates: sc.replicates,
        violations,
        empirical_violation_rate: rate,
        delta_single,
        consistent: rate <= bound.clamped + 3.0 * stderr,
        bound,
        mc_stderr: stderr,
    })
}
