//! The optimization loop: ask, archive, compare, tell, recommend.
//!
//! Only the index of the comparison winner crosses from [`compare`] to the
//! optimizer. Scores go to the archive and to observers, never to `tell`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{Archive, ArchiveEntry, Score};
use crate::config::{ConfigError, RunConfig};
use crate::evaluators::{EvalError, Evaluator, Split};
use crate::optimizers::{Algorithm, AskBatch, Optimizer, OptimizerError};
use crate::space::{PrePrompt, SearchSpace, Violation};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompareOutcome {
    /// 1-based index of the winner.
    pub winner: usize,
    /// Retained for logging only.
    pub scores: Vec<Score>,
}

/// Argmax of `scores`, ties going to the highest index (1-based result).
pub fn winner_of(scores: &[Score]) -> usize {
    assert!(!scores.is_empty(), "no candidates to compare");
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s >= scores[best] {
            best = i;
        }
    }
    best + 1
}

/// Scores every candidate on the training split and picks the winner.
/// Candidates are evaluated concurrently.
pub fn compare<E: Evaluator + ?Sized>(
    batch: &AskBatch,
    evaluator: &E,
) -> Result<CompareOutcome, EvalError> {
    let scores = batch
        .candidates()
        .par_iter()
        .map(|c| evaluator.evaluate(c, Split::Train).map(|r| r.score()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CompareOutcome {
        winner: winner_of(&scores),
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot recommend from an empty archive")]
pub struct EmptyArchive;

/// Best archived candidate by training score; ties go to the earliest step,
/// then the lowest batch position.
pub fn recommend(archive: &Archive) -> Result<PrePrompt, EmptyArchive> {
    archive
        .best_index()
        .map(|i| archive.entries()[i].candidate.clone())
        .ok_or(EmptyArchive)
}

/// Information returned to the optimizer over a run: `b * log2(kappa)` bits.
pub fn info_bits(budget: u32, kappa: usize) -> f64 {
    budget as f64 * (kappa as f64).log2()
}

/// Where the winner index comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Feedback {
    /// The real comparison outcome.
    Scores,
    /// A fixed winner sequence, one entry per step (scores are still recorded).
    Forced(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u32,
    pub candidates: Vec<Vec<u32>>,
    /// `"correct/total"` per candidate.
    pub scores: Vec<String>,
    pub winner: usize,
}

/// What an observer sees after each step.
pub struct StepView<'a> {
    pub record: &'a StepRecord,
    pub archive: &'a Archive,
    /// Archive index of the running recommendation.
    pub best: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub algorithm: Algorithm,
    pub recommendation: PrePrompt,
    pub recommendation_score: Score,
    pub archive: Archive,
    pub feedback_trace: Vec<usize>,
    pub bits_used: f64,
}

#[derive(Debug, Error)]
pub enum RunErrorKind {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("optimizer proposed an invalid candidate: {0}")]
    InvalidCandidate(Violation),
    #[error("optimizer returned {got} candidates, expected {kappa}")]
    BatchSize { got: usize, kappa: usize },
    #[error("forced feedback has {got} entries for a budget of {budget}")]
    FeedbackLength { got: usize, budget: u32 },
}

/// A failed run. `partial` holds every step completed before the failure.
#[derive(Debug, Error)]
#[error("run aborted at step {step}: {kind}")]
pub struct RunError {
    pub step: u32,
    pub kind: RunErrorKind,
    pub partial: Archive,
}

/// Runs `config` against `evaluator` with a freshly built optimizer.
pub fn run<E: Evaluator + ?Sized>(config: &RunConfig, evaluator: &E) -> Result<RunResult, RunError> {
    run_observed(config, evaluator, Feedback::Scores, |_| {})
}

pub fn run_observed<E, F>(
    config: &RunConfig,
    evaluator: &E,
    feedback: Feedback,
    observe: F,
) -> Result<RunResult, RunError>
where
    E: Evaluator + ?Sized,
    F: FnMut(&StepView<'_>),
{
    let fail = |kind: RunErrorKind| RunError {
        step: 0,
        kind,
        partial: Archive::new(),
    };
    config.validate().map_err(|e| fail(e.into()))?;
    let space = config.space().map_err(|e| fail(e.into()))?;
    let mut optimizer = config
        .algorithm
        .build(space, config.seed, config.warm_start.clone())
        .map_err(|e| fail(e.into()))?;
    let mut result = run_with_optimizer(
        space,
        config.budget,
        optimizer.as_mut(),
        evaluator,
        feedback,
        observe,
    )?;
    if config.reevaluate {
        let (rec, score) = reevaluated_recommendation(&result.archive, evaluator).map_err(|e| RunError {
            step: config.budget,
            kind: e.into(),
            partial: result.archive.clone(),
        })?;
        result.recommendation = rec;
        result.recommendation_score = score;
    }
    Ok(result)
}

/// The loop itself, for a caller-supplied optimizer (e.g. an instrumented
/// wrapper).
pub fn run_with_optimizer<E, F>(
    space: SearchSpace,
    budget: u32,
    optimizer: &mut dyn Optimizer,
    evaluator: &E,
    feedback: Feedback,
    mut observe: F,
) -> Result<RunResult, RunError>
where
    E: Evaluator + ?Sized,
    F: FnMut(&StepView<'_>),
{
    let kappa = optimizer.kappa();
    let mut archive = Archive::new();
    let mut trace = Vec::with_capacity(budget as usize);
    let mut best: Option<usize> = None;

    if let Feedback::Forced(seq) = &feedback {
        if seq.len() != budget as usize {
            return Err(RunError {
                step: 0,
                kind: RunErrorKind::FeedbackLength {
                    got: seq.len(),
                    budget,
                },
                partial: archive,
            });
        }
    }

    for step in 1..=budget {
        let abort = |kind: RunErrorKind, archive: Archive| RunError {
            step,
            kind,
            partial: archive,
        };
        let batch = optimizer.ask();
        if batch.len() != kappa {
            return Err(abort(
                RunErrorKind::BatchSize {
                    got: batch.len(),
                    kappa,
                },
                archive,
            ));
        }
        if let Some(v) = batch.candidates().iter().find_map(|c| space.validate(c).err()) {
            return Err(abort(RunErrorKind::InvalidCandidate(v), archive));
        }
        let outcome = match compare(&batch, evaluator) {
            Ok(o) => o,
            Err(e) => return Err(abort(e.into(), archive)),
        };
        let winner = match &feedback {
            Feedback::Scores => outcome.winner,
            Feedback::Forced(seq) => seq[step as usize - 1],
        };
        for (pos, (cand, score)) in batch.candidates().iter().zip(&outcome.scores).enumerate() {
            archive.push(ArchiveEntry {
                step,
                candidate: cand.clone(),
                correct: score.correct,
                total: score.total,
                chosen: pos + 1 == winner,
            });
            let idx = archive.len() - 1;
            if best.is_none_or(|b| archive.entries()[b].score() < *score) {
                best = Some(idx);
            }
        }
        if let Err(e) = optimizer.tell(winner, &batch) {
            return Err(abort(e.into(), archive));
        }
        trace.push(winner);
        let record = StepRecord {
            step,
            candidates: batch
                .candidates()
                .iter()
                .map(|c| c.indices().to_vec())
                .collect(),
            scores: outcome.scores.iter().map(Score::to_string).collect(),
            winner,
        };
        observe(&StepView {
            record: &record,
            archive: &archive,
            best: best.expect("archive is non-empty"),
        });
    }

    let best = best.expect("budget >= 1");
    debug_assert_eq!(archive.best_index(), Some(best));
    let entry = &archive.entries()[best];
    Ok(RunResult {
        algorithm: optimizer.algorithm(),
        recommendation: entry.candidate.clone(),
        recommendation_score: entry.score(),
        feedback_trace: trace,
        bits_used: info_bits(budget, kappa),
        archive,
    })
}

/// Re-scores each distinct archived candidate once more and recommends the
/// best pooled score (stored plus fresh evaluations), earliest on ties.
pub fn reevaluated_recommendation<E: Evaluator + ?Sized>(
    archive: &Archive,
    evaluator: &E,
) -> Result<(PrePrompt, Score), EvalError> {
    let mut pooled: Vec<(PrePrompt, u64, u64)> = Vec::new();
    for e in archive.entries() {
        match pooled.iter_mut().find(|(p, _, _)| *p == e.candidate) {
            Some(slot) => {
                slot.1 += e.correct as u64;
                slot.2 += e.total as u64;
            }
            None => pooled.push((e.candidate.clone(), e.correct as u64, e.total as u64)),
        }
    }
    let fresh = pooled
        .par_iter()
        .map(|(p, _, _)| evaluator.evaluate(p, Split::Train))
        .collect::<Result<Vec<_>, _>>()?;
    let mut best: Option<(usize, u64, u64)> = None;
    for (k, ((_, c, t), r)) in pooled.iter().zip(&fresh).enumerate() {
        let (c, t) = (c + r.correct as u64, t + r.total as u64);
        let better = match best {
            None => true,
            Some((_, bc, bt)) => c as u128 * bt as u128 > bc as u128 * t as u128,
        };
        if better {
            best = Some((k, c, t));
        }
    }
    let (k, _, _) = best.ok_or(EvalError::EmptyPrePrompt)?;
    Ok((pooled[k].0.clone(), fresh[k].score()))
}

/// Wraps an optimizer and records everything passed to `tell`.
pub struct FeedbackRecorder<O> {
    inner: O,
    /// `(best_index, batch size)` per tell.
    pub received: Vec<(usize, usize)>,
    /// Whether every told batch was the batch most recently asked.
    pub batches_match: bool,
    last_ask: Option<AskBatch>,
}

impl<O: Optimizer> FeedbackRecorder<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            received: Vec::new(),
            batches_match: true,
            last_ask: None,
        }
    }
}

impl<O: Optimizer> Optimizer for FeedbackRecorder<O> {
    fn algorithm(&self) -> Algorithm {
        self.inner.algorithm()
    }

    fn kappa(&self) -> usize {
        self.inner.kappa()
    }

    fn ask(&mut self) -> AskBatch {
        let b = self.inner.ask();
        self.last_ask = Some(b.clone());
        b
    }

    fn tell(&mut self, best_index: usize, batch: &AskBatch) -> Result<(), OptimizerError> {
        self.received.push((best_index, batch.len()));
        self.batches_match &= self.last_ask.as_ref() == Some(batch);
        self.inner.tell(best_index, batch)
    }

    fn incumbent(&self) -> Option<&PrePrompt> {
        self.inner.incumbent()
    }

    fn steps(&self) -> u64 {
        self.inner.steps()
    }
}

impl Optimizer for Box<dyn Optimizer> {
    fn algorithm(&self) -> Algorithm {
        (**self).algorithm()
    }
    fn kappa(&self) -> usize {
        (**self).kappa()
    }
    fn ask(&mut self) -> AskBatch {
        (**self).ask()
    }
    fn tell(&mut self, best_index: usize, batch: &AskBatch) -> Result<(), OptimizerError> {
        (**self).tell(best_index, batch)
    }
    fn incumbent(&self) -> Option<&PrePrompt> {
        (**self).incumbent()
    }
    fn steps(&self) -> u64 {
        (**self).steps()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluators::{EvalReport, World, WorldParams};
    use std::collections::BTreeSet;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn s(c: u32, t: u32) -> Score {
        Score::new(c, t).unwrap()
    }

    fn world() -> World {
        World::new(WorldParams {
            seed: 21,
            n_demos: 40,
            n_train: 120,
            n_test: 100,
            ..WorldParams::default()
        })
        .unwrap()
    }

    fn config(alg: Algorithm, budget: u32, seed: u64) -> RunConfig {
        RunConfig::synthetic(seed, budget, alg, 4, world().params().clone())
    }

    #[test]
    fn winner_rules() {
        assert_eq!(winner_of(&[s(3, 10)]), 1);
        assert_eq!(winner_of(&[s(60, 100), s(70, 100)]), 2);
        assert_eq!(winner_of(&[s(60, 100), s(60, 100)]), 2);
        assert_eq!(winner_of(&[s(7, 10), s(6, 10)]), 1);
        assert_eq!(winner_of(&[s(5, 10), s(7, 10), s(7, 10), s(1, 10)]), 3);
    }

    #[test]
    fn info_bits_values() {
        assert_eq!(info_bits(100, 2), 100.0);
        assert_eq!(info_bits(37, 1), 0.0);
        assert_eq!(info_bits(10, 4), 20.0);
    }

    #[test]
    fn recommend_rules() {
        assert_eq!(recommend(&Archive::new()), Err(EmptyArchive));
        let mut a = Archive::new();
        let e = |step, idx: u32, correct| ArchiveEntry {
            step,
            candidate: PrePrompt::new(vec![idx]),
            correct,
            total: 10,
            chosen: true,
        };
        a.push(e(1, 0, 5));
        assert_eq!(recommend(&a).unwrap().indices(), &[0]);
        a.push(e(2, 1, 7));
        assert_eq!(recommend(&a).unwrap().indices(), &[1]);
        a.push(e(3, 2, 9));
        a.push(e(7, 3, 9));
        assert_eq!(recommend(&a).unwrap().indices(), &[2]);
    }

    #[test]
    fn budget_five_trace() {
        let w = world();
        let r = run(&config(Algorithm::DiscreteOnePlusOne, 5, 1), &w).unwrap();
        assert_eq!(r.feedback_trace.len(), 5);
        assert!(r.feedback_trace.iter().all(|f| (1..=2).contains(f)));
        assert_eq!(r.archive.len(), 10);
        assert_eq!(r.bits_used, 5.0);
    }

    #[test]
    fn budget_one_archives_incumbent_and_mutant() {
        let w = world();
        let r = run(&config(Algorithm::DiscreteOnePlusOne, 1, 1), &w).unwrap();
        assert_eq!(r.archive.len(), 2);
        assert_eq!(r.archive.entries().iter().filter(|e| e.chosen).count(), 1);
        assert!(r.archive.entries().iter().any(|e| e.candidate == r.recommendation));
    }

    #[test]
    fn random_search_archives_every_draw() {
        let w = world();
        let r = run(&config(Algorithm::RandomSearch, 30, 4), &w).unwrap();
        assert_eq!(r.archive.len(), 30);
        assert!(r.feedback_trace.iter().all(|&f| f == 1));
        assert_eq!(r.bits_used, 0.0);
        let best = r.archive.entries().iter().map(|e| e.score()).max().unwrap();
        assert_eq!(r.recommendation_score, best);
    }

    #[test]
    fn incumbent_score_never_decreases() {
        let w = world();
        for alg in Algorithm::ALL.into_iter().filter(|a| a.kappa() == 2) {
            let mut incumbent_scores = Vec::new();
            run_observed(&config(alg, 60, 9), &w, Feedback::Scores, |v| {
                let entries = &v.archive.entries()[v.archive.len() - 2..];
                incumbent_scores.push(entries[v.record.winner - 1].score());
            })
            .unwrap();
            assert!(incumbent_scores.windows(2).all(|p| p[0] <= p[1]), "{alg}");
        }
    }

    #[test]
    fn archive_replay_reproduces_recommendation() {
        let w = world();
        for alg in Algorithm::ALL {
            let r = run(&config(alg, 25, 3), &w).unwrap();
            let replay = Archive::read_jsonl(r.archive.to_jsonl().as_bytes()).unwrap();
            assert_eq!(recommend(&replay).unwrap(), r.recommendation);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let w = world();
        for alg in Algorithm::ALL {
            let a = run(&config(alg, 20, 77), &w).unwrap();
            let b = run(&config(alg, 20, 77), &w).unwrap();
            assert_eq!(a.archive.to_jsonl(), b.archive.to_jsonl());
        }
    }

    #[test]
    fn forced_feedback_enumeration_is_bounded() {
        let w = world();
        let cfg = config(Algorithm::DiscreteOnePlusOne, 3, 5);
        let mut recs = BTreeSet::new();
        for mask in 0..8u32 {
            let seq: Vec<usize> = (0..3).map(|k| 1 + ((mask >> k) & 1) as usize).collect();
            let r = run_observed(&cfg, &w, Feedback::Forced(seq.clone()), |_| {}).unwrap();
            assert_eq!(r.feedback_trace, seq);
            recs.insert(r.recommendation);
        }
        assert!(recs.len() <= 8);
        assert!(matches!(
            run_observed(&cfg, &w, Feedback::Forced(vec![1]), |_| {}),
            Err(RunError {
                kind: RunErrorKind::FeedbackLength { got: 1, budget: 3 },
                ..
            })
        ));
    }

    #[test]
    fn recorder_sees_only_winner_symbols() {
        let w = world();
        let space = SearchSpace::new(4, 40).unwrap();
        let inner = Algorithm::Lengler.build(space, 2, None).unwrap();
        let mut rec = FeedbackRecorder::new(inner);
        let r = run_with_optimizer(space, 50, &mut rec, &w, Feedback::Scores, |_| {}).unwrap();
        assert_eq!(rec.received.len(), 50);
        assert!(rec.batches_match);
        assert_eq!(
            rec.received.iter().map(|(b, _)| *b).collect::<Vec<_>>(),
            r.feedback_trace
        );
    }

    /// Fails on the `n`-th call.
    struct Flaky {
        world: World,
        calls: AtomicUsize,
        fail_at: usize,
    }

    impl Evaluator for Flaky {
        fn cardinality(&self) -> usize {
            self.world.cardinality()
        }
        fn evaluate(&self, pre: &PrePrompt, split: Split) -> Result<EvalReport, EvalError> {
            if self.calls.fetch_add(1, Ordering::SeqCst) >= self.fail_at {
                return Err(EvalError::Timeout {
                    id: 0,
                    timeout_ms: 1,
                });
            }
            self.world.evaluate(pre, split)
        }
    }

    #[test]
    fn evaluator_failure_returns_partial_archive() {
        let flaky = Flaky {
            world: world(),
            calls: AtomicUsize::new(0),
            fail_at: 7,
        };
        let err = run(&config(Algorithm::DiscreteOnePlusOne, 10, 1), &flaky).unwrap_err();
        assert!(matches!(err.kind, RunErrorKind::Eval(EvalError::Timeout { .. })));
        assert_eq!(err.step, 4);
        assert_eq!(err.partial.len(), 6);
    }

    #[test]
    fn reevaluation_agrees_on_deterministic_worlds() {
        let w = world();
        let mut cfg = config(Algorithm::Portfolio, 30, 8);
        let plain = run(&cfg, &w).unwrap();
        cfg.reevaluate = true;
        let re = run(&cfg, &w).unwrap();
        assert_eq!(plain.recommendation, re.recommendation);
        assert_eq!(plain.recommendation_score, re.recommendation_score);
    }
}
