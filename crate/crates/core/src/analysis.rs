//! Post-hoc studies on a finished pre-prompt: reordering, removal, fusion,
//! majority voting, and transfer to another evaluator.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::Score;
use crate::evaluators::{EvalError, EvalReport, Evaluator, Split, World};
use crate::rng::derive_indexed;
use crate::space::PrePrompt;
use crate::stats::median;

pub const STUDY_SCHEMA: &str = "eppo.study/v1";

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("pre-prompt needs at least 2 examples, has {0}")]
    TooShort(usize),
    #[error("every example is identical; no other ordering exists")]
    NoDistinctOrder,
    #[error("k_target must be in [1, {len}), got {k}")]
    Target { k: usize, len: usize },
    #[error("n_paths must be odd and at least 1, got {0}")]
    Paths(usize),
    #[error("temperature must be finite and non-negative, got {0}")]
    Temperature(f64),
    #[error("pre-prompt uses demonstration {index} but the evaluator has {cardinality}")]
    Cardinality { index: u32, cardinality: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// `variant - base`, kept as an exact fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delta {
    pub num: i128,
    pub den: u128,
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Delta {
    pub fn between(variant: Score, base: Score) -> Self {
        let num = variant.correct as i128 * base.total as i128
            - base.correct as i128 * variant.total as i128;
        let den = variant.total as u128 * base.total as u128;
        let g = gcd(num.unsigned_abs(), den).max(1);
        Self {
            num: num / g as i128,
            den: den / g,
        }
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn is_zero(&self) -> bool {
        self.num == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub schema: String,
    pub study: String,
    pub split: Split,
    pub base: Vec<u32>,
    pub base_score: Score,
    pub variants: Vec<Vec<u32>>,
    pub variant_scores: Vec<Score>,
    pub deltas: Vec<Delta>,
    /// `None` when there are no variants.
    pub summary: Option<Summary>,
}

impl StudyReport {
    fn new(
        study: &str,
        split: Split,
        base: &PrePrompt,
        base_score: Score,
        variants: Vec<PrePrompt>,
        variant_scores: Vec<Score>,
    ) -> Self {
        let deltas: Vec<Delta> = variant_scores
            .iter()
            .map(|&s| Delta::between(s, base_score))
            .collect();
        let values: Vec<f64> = deltas.iter().map(Delta::value).collect();
        let summary = median(&values).map(|median| Summary {
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            median,
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
        Self {
            schema: STUDY_SCHEMA.into(),
            study: study.into(),
            split,
            base: base.indices().to_vec(),
            base_score,
            variants: variants.into_iter().map(PrePrompt::into_indices).collect(),
            variant_scores,
            deltas,
            summary,
        }
    }

    /// One row per variant: `variant,indices,score,delta`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,indices,correct,total,delta\n");
        for (i, ((v, s), d)) in self
            .variants
            .iter()
            .zip(&self.variant_scores)
            .zip(&self.deltas)
            .enumerate()
        {
            let idx: Vec<String> = v.iter().map(u32::to_string).collect();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                i + 1,
                idx.join(" "),
                s.correct,
                s.total,
                d.value()
            ));
        }
        out
    }
}

fn score_all<E: Evaluator + ?Sized>(
    evaluator: &E,
    variants: &[PrePrompt],
    split: Split,
) -> Result<Vec<Score>, EvalError> {
    variants
        .par_iter()
        .map(|v| evaluator.evaluate(v, split).map(|r| r.score()))
        .collect()
}

/// Scores `n_perm` random reorderings of `pre`, each different from `pre`.
pub fn permutation_study<E: Evaluator + ?Sized, R: Rng + ?Sized>(
    pre: &PrePrompt,
    evaluator: &E,
    split: Split,
    n_perm: usize,
    rng: &mut R,
) -> Result<StudyReport, AnalysisError> {
    if pre.len() < 2 {
        return Err(AnalysisError::TooShort(pre.len()));
    }
    if pre.indices().iter().all(|&i| i == pre.indices()[0]) {
        return Err(AnalysisError::NoDistinctOrder);
    }
    let base = evaluator.evaluate(pre, split)?.score();
    let variants: Vec<PrePrompt> = (0..n_perm)
        .map(|_| loop {
            let mut v = pre.indices().to_vec();
            v.shuffle(rng);
            if v != pre.indices() {
                break PrePrompt::new(v);
            }
        })
        .collect();
    let scores = score_all(evaluator, &variants, split)?;
    Ok(StudyReport::new("permute", split, pre, base, variants, scores))
}

/// Scores `n_samples` random order-preserving subsequences of length
/// `k_target`.
pub fn removal_study<E: Evaluator + ?Sized, R: Rng + ?Sized>(
    pre: &PrePrompt,
    evaluator: &E,
    split: Split,
    k_target: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<StudyReport, AnalysisError> {
    if k_target == 0 || k_target >= pre.len() {
        return Err(AnalysisError::Target {
            k: k_target,
            len: pre.len(),
        });
    }
    let base = evaluator.evaluate(pre, split)?.score();
    let variants: Vec<PrePrompt> = (0..n_samples)
        .map(|_| {
            let mut keep = index::sample(rng, pre.len(), k_target).into_vec();
            keep.sort_unstable();
            PrePrompt::new(keep.into_iter().map(|i| pre.indices()[i]).collect())
        })
        .collect();
    let scores = score_all(evaluator, &variants, split)?;
    Ok(StudyReport::new("remove", split, pre, base, variants, scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseStrategy {
    /// Better pre-prompt first.
    BestFirst,
    /// Worse pre-prompt first.
    BestLast,
    /// Interleaved, starting with the better one.
    Alternate,
}

impl std::str::FromStr for FuseStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "best_first" => Ok(Self::BestFirst),
            "best_last" => Ok(Self::BestLast),
            "alternate" => Ok(Self::Alternate),
            other => Err(format!("unknown fuse strategy {other:?}")),
        }
    }
}

/// Concatenates two pre-prompts. On equal scores `p1` counts as the better.
pub fn fuse(p1: &PrePrompt, p2: &PrePrompt, score1: Score, score2: Score, strategy: FuseStrategy) -> PrePrompt {
    let (better, worse) = if score1 >= score2 { (p1, p2) } else { (p2, p1) };
    let (b, w) = (better.indices(), worse.indices());
    let out = match strategy {
        FuseStrategy::BestFirst => [b, w].concat(),
        FuseStrategy::BestLast => [w, b].concat(),
        FuseStrategy::Alternate => {
            let mut out = Vec::with_capacity(b.len() + w.len());
            for i in 0..b.len().max(w.len()) {
                out.extend(b.get(i));
                out.extend(w.get(i));
            }
            out
        }
    };
    PrePrompt::new(out)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-path correctness under sampling temperature `tau`: the logit of
/// `acc` shrunk by `1 + tau`.
pub fn path_probability(acc: f64, tau: f64) -> f64 {
    if acc <= 0.0 || acc >= 1.0 {
        return acc.clamp(0.0, 1.0);
    }
    logistic((acc / (1.0 - acc)).ln() / (1.0 + tau))
}

/// Majority-vote exact match over `n_paths` sampled answers per question.
///
/// Path 0 of question `j` reuses the question's own threshold, so one path
/// at `tau = 0` reproduces the plain evaluation exactly; the other paths draw
/// from a per-question stream keyed by `seed`.
pub fn self_consistency(
    world: &World,
    pre: &PrePrompt,
    split: Split,
    n_paths: usize,
    tau: f64,
    seed: u64,
) -> Result<f64, AnalysisError> {
    if n_paths.is_multiple_of(2) {
        return Err(AnalysisError::Paths(n_paths));
    }
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(AnalysisError::Temperature(tau));
    }
    crate::evaluators::check_indices(pre, world.params().n_demos)?;
    let questions = world.split(split);
    if questions.is_empty() {
        return Err(EvalError::ScoreOutOfRange {
            correct: 0,
            total: 0,
        }
        .into());
    }
    let accs = world.accuracies(pre, split);
    let wins: Vec<bool> = questions
        .par_iter()
        .zip(&accs)
        .enumerate()
        .map(|(j, (q, &acc))| {
            let p = path_probability(acc, tau);
            let mut rng = derive_indexed(seed, b"self-consistency", j as u64);
            let mut correct = usize::from(q.threshold < p);
            for _ in 1..n_paths {
                correct += usize::from(rng.random::<f64>() < p);
            }
            correct > n_paths / 2
        })
        .collect();
    Ok(wins.iter().filter(|&&w| w).count() as f64 / wins.len() as f64)
}

/// Probability that a strict majority of `n` independent paths, each
/// correct with probability `p`, is correct.
pub fn majority_probability(n: usize, p: f64) -> f64 {
    let mut total = 0.0;
    let mut binom = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            binom = binom * (n - k + 1) as f64 / k as f64;
        }
        if 2 * k > n {
            total += binom * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32);
        }
    }
    total
}

/// Scores a saved pre-prompt under a different evaluator.
pub fn transfer_eval<E: Evaluator + ?Sized>(
    pre: &PrePrompt,
    evaluator: &E,
    split: Split,
) -> Result<EvalReport, AnalysisError> {
    let cardinality = evaluator.cardinality();
    if let Some(index) = pre.max_index().filter(|&m| m as usize >= cardinality) {
        return Err(AnalysisError::Cardinality { index, cardinality });
    }
    Ok(evaluator.evaluate(pre, split)?)
}
