//! Comparison-based ask-and-tell optimizers over [`SearchSpace`].
//!
//! An optimizer proposes `kappa` candidates per step through [`Optimizer::ask`]
//! and learns only the 1-based index of the winning candidate through
//! [`Optimizer::tell`]. Scores never reach it.

pub mod crossover;
pub mod mutation;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_stream, Stream};
use crate::space::{PrePrompt, SearchSpace, Violation};

pub use crossover::CrossoverKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "random_search")]
    RandomSearch,
    #[serde(rename = "disc_1p1")]
    DiscreteOnePlusOne,
    #[serde(rename = "portfolio")]
    Portfolio,
    #[serde(rename = "double_fastga")]
    DoubleFastGa,
    #[serde(rename = "lengler_1p1")]
    Lengler,
    #[serde(rename = "lognormal_1p1")]
    LogNormal,
    #[serde(rename = "recomb_lengler")]
    RecombiningLengler,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::RandomSearch,
        Algorithm::DiscreteOnePlusOne,
        Algorithm::Portfolio,
        Algorithm::DoubleFastGa,
        Algorithm::Lengler,
        Algorithm::LogNormal,
        Algorithm::RecombiningLengler,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Algorithm::RandomSearch => "random_search",
            Algorithm::DiscreteOnePlusOne => "disc_1p1",
            Algorithm::Portfolio => "portfolio",
            Algorithm::DoubleFastGa => "double_fastga",
            Algorithm::Lengler => "lengler_1p1",
            Algorithm::LogNormal => "lognormal_1p1",
            Algorithm::RecombiningLengler => "recomb_lengler",
        }
    }

    /// Candidates per comparison.
    pub fn kappa(self) -> usize {
        match self {
            Algorithm::RandomSearch => 1,
            _ => 2,
        }
    }

    /// Builds a fresh optimizer whose randomness comes from the `optimizer`
    /// stream of `seed`. A warm start replaces the uniform initial incumbent.
    pub fn build(
        self,
        space: SearchSpace,
        seed: u64,
        warm_start: Option<PrePrompt>,
    ) -> Result<Box<dyn Optimizer>, OptimizerError> {
        if let Some(w) = &warm_start {
            space.validate(w).map_err(OptimizerError::WarmStart)?;
        }
        let rng = derive_stream(seed, b"optimizer");
        let opt: Box<dyn Optimizer> = match self {
            Algorithm::RandomSearch => Box::new(RandomSearch::new(space, rng, warm_start)),
            Algorithm::DiscreteOnePlusOne => Box::new(OnePlusOne::new(
                self,
                space,
                MutationRule::FixedRate(1.0 / space.shots() as f64),
                None,
                rng,
                warm_start,
            )),
            Algorithm::Portfolio => Box::new(OnePlusOne::new(
                self,
                space,
                MutationRule::Portfolio,
                None,
                rng,
                warm_start,
            )),
            Algorithm::DoubleFastGa => Box::new(OnePlusOne::new(
                self,
                space,
                MutationRule::FastGa,
                None,
                rng,
                warm_start,
            )),
            Algorithm::Lengler => Box::new(OnePlusOne::new(
                self,
                space,
                MutationRule::Lengler,
                None,
                rng,
                warm_start,
            )),
            Algorithm::LogNormal => Box::new(OnePlusOne::new(
                self,
                space,
                MutationRule::LogNormal,
                None,
                rng,
                warm_start,
            )),
            Algorithm::RecombiningLengler => Box::new(OnePlusOne::new(
                self,
                space,
                MutationRule::Lengler,
                Some(CrossoverKind::Uniform),
                rng,
                warm_start,
            )),
        };
        Ok(opt)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown algorithm tag {0:?}")]
pub struct UnknownAlgorithm(pub String);

impl FromStr for Algorithm {
    type Err = UnknownAlgorithm;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| UnknownAlgorithm(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OptimizerError {
    #[error("best index {index} outside 1..={kappa}")]
    BestIndex { index: usize, kappa: usize },
    #[error("told about a batch that was not the most recent ask")]
    StaleBatch,
    #[error("invalid warm start: {0}")]
    WarmStart(Violation),
}

/// The candidates of one comparison, in the order the optimizer asked them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AskBatch {
    candidates: Vec<PrePrompt>,
}

impl AskBatch {
    pub fn new(candidates: Vec<PrePrompt>) -> Self {
        Self { candidates }
    }

    pub fn candidates(&self) -> &[PrePrompt] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// 1-based access, matching the comparison feedback convention.
    pub fn get(&self, best_index: usize) -> Option<&PrePrompt> {
        best_index
            .checked_sub(1)
            .and_then(|i| self.candidates.get(i))
    }
}

pub trait Optimizer: Send {
    fn algorithm(&self) -> Algorithm;

    fn kappa(&self) -> usize;

    fn ask(&mut self) -> AskBatch;

    /// `best_index` is 1-based. Nothing but the index and the batch reaches
    /// the optimizer.
    fn tell(&mut self, best_index: usize, batch: &AskBatch) -> Result<(), OptimizerError>;

    fn incumbent(&self) -> Option<&PrePrompt>;

    /// Number of completed tells.
    fn steps(&self) -> u64;
}

fn check_tell(
    best_index: usize,
    kappa: usize,
    pending: &Option<AskBatch>,
    batch: &AskBatch,
) -> Result<(), OptimizerError> {
    if !(1..=kappa).contains(&best_index) {
        return Err(OptimizerError::BestIndex {
            index: best_index,
            kappa,
        });
    }
    if pending.as_ref() != Some(batch) {
        return Err(OptimizerError::StaleBatch);
    }
    Ok(())
}

/// Independent uniform draws; `kappa = 1`.
pub struct RandomSearch {
    space: SearchSpace,
    rng: Stream,
    first: Option<PrePrompt>,
    pending: Option<AskBatch>,
    steps: u64,
}

impl RandomSearch {
    pub fn new(space: SearchSpace, rng: Stream, warm_start: Option<PrePrompt>) -> Self {
        Self {
            space,
            rng,
            first: warm_start,
            pending: None,
            steps: 0,
        }
    }
}

impl Optimizer for RandomSearch {
    fn algorithm(&self) -> Algorithm {
        Algorithm::RandomSearch
    }

    fn kappa(&self) -> usize {
        1
    }

    fn ask(&mut self) -> AskBatch {
        let p = match self.first.take() {
            Some(p) => p,
            None => self.space.sample(&mut self.rng),
        };
        let batch = AskBatch::new(vec![p]);
        self.pending = Some(batch.clone());
        batch
    }

    fn tell(&mut self, best_index: usize, batch: &AskBatch) -> Result<(), OptimizerError> {
        check_tell(best_index, 1, &self.pending, batch)?;
        self.pending = None;
        self.steps += 1;
        Ok(())
    }

    fn incumbent(&self) -> Option<&PrePrompt> {
        None
    }

    fn steps(&self) -> u64 {
        self.steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MutationRule {
    FixedRate(f64),
    Portfolio,
    FastGa,
    Lengler,
    LogNormal,
}

/// Elitist `(1+1)` search: batch position 1 is the incumbent, position 2 the
/// offspring, and the incumbent becomes whichever the comparison picks.
pub struct OnePlusOne {
    algorithm: Algorithm,
    space: SearchSpace,
    rule: MutationRule,
    recombine: Option<CrossoverKind>,
    rng: Stream,
    incumbent: Option<PrePrompt>,
    /// Self-adapted rate (log-normal rule only).
    rate: f64,
    proposed_rate: f64,
    /// Every candidate asked so far, the parent pool for recombination.
    history: Vec<PrePrompt>,
    pending: Option<AskBatch>,
    steps: u64,
}

impl OnePlusOne {
    pub fn new(
        algorithm: Algorithm,
        space: SearchSpace,
        rule: MutationRule,
        recombine: Option<CrossoverKind>,
        rng: Stream,
        warm_start: Option<PrePrompt>,
    ) -> Self {
        let rate = mutation::lognormal_bounds(space.shots()).0;
        Self {
            algorithm,
            space,
            rule,
            recombine,
            rng,
            incumbent: warm_start,
            rate,
            proposed_rate: rate,
            history: Vec::new(),
            pending: None,
            steps: 0,
        }
    }

    /// Current self-adapted mutation rate.
    pub fn rate(&self) -> f64 {
        self.rate
    }

    fn mutate(&mut self, parent: &PrePrompt) -> PrePrompt {
        let (sp, rng) = (&self.space, &mut self.rng);
        match self.rule {
            MutationRule::FixedRate(p) => mutation::mutate_fixed_rate(parent, p, sp, rng),
            MutationRule::Portfolio => mutation::mutate_portfolio(parent, sp, rng),
            MutationRule::FastGa => mutation::mutate_fastga(parent, sp, rng),
            MutationRule::Lengler => mutation::mutate_lengler(parent, self.steps, sp, rng),
            MutationRule::LogNormal => {
                let (child, p) = mutation::mutate_lognormal(self.rate, parent, sp, rng);
                self.proposed_rate = p;
                child
            }
        }
    }

    fn offspring(&mut self, parent: &PrePrompt) -> PrePrompt {
        if let Some(kind) = self.recombine {
            if !self.history.is_empty() && self.rng.random::<bool>() {
                let mate = self.history[self.rng.random_range(0..self.history.len())].clone();
                let child = crossover::crossover(parent, &mate, kind, &mut self.rng)
                    .expect("history shares the space's length");
                // a child identical to its parent carries no new information
                if &child != parent {
                    return child;
                }
            }
        }
        self.mutate(parent)
    }
}

impl Optimizer for OnePlusOne {
    fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    fn kappa(&self) -> usize {
        2
    }

    fn ask(&mut self) -> AskBatch {
        let parent = match &self.incumbent {
            Some(p) => p.clone(),
            None => {
                let p = self.space.sample(&mut self.rng);
                self.incumbent = Some(p.clone());
                p
            }
        };
        let child = self.offspring(&parent);
        let batch = AskBatch::new(vec![parent, child]);
        self.pending = Some(batch.clone());
        batch
    }

    fn tell(&mut self, best_index: usize, batch: &AskBatch) -> Result<(), OptimizerError> {
        check_tell(best_index, 2, &self.pending, batch)?;
        self.pending = None;
        if best_index == 2 && self.rule == MutationRule::LogNormal {
            self.rate = self.proposed_rate;
        }
        self.incumbent = batch.get(best_index).cloned();
        if self.recombine.is_some() {
            self.history.extend(batch.candidates().iter().cloned());
        }
        self.steps += 1;
        Ok(())
    }

    fn incumbent(&self) -> Option<&PrePrompt> {
        self.incumbent.as_ref()
    }

    fn steps(&self) -> u64 {
        self.steps
    }
}
