//! Deterministic synthetic stand-in for "LLM + benchmark".
//!
//! Each demonstration `i` carries a latent skill vector `z_i` and each
//! question `j` a need vector `q_j`, a base ability `beta_j` and a threshold
//! `u_j ~ U[0,1]`. A pre-prompt `P` answers question `j` correctly iff
//! `u_j < acc_j(P)` with
//!
//! ```text
//! acc_j(P) = logistic(beta_j + sum_{i in set(P)} z_i . q_j - gamma * duplicates(P))
//! ```
//!
//! Questions are generated from `(seed, id)` alone, so any set of distinct
//! ids is an i.i.d. sample of questions.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_indices, EvalError, EvalReport, Evaluator, Split};
use crate::rng::derive_indexed;
use crate::space::PrePrompt;

/// First id of the question family used for re-partitioned training sets.
pub const REPARTITION_BASE: u64 = 1 << 32;
/// First id of the question family used for expected-risk estimates; above
/// every partition id.
pub const TRUE_RISK_BASE: u64 = 1 << 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldParams {
    pub seed: u64,
    pub n_demos: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Dimension of skill and need vectors.
    pub rank: usize,
    /// Logit penalty per duplicated demonstration.
    pub gamma: f64,
    pub base_mean: f64,
    pub base_sd: f64,
    pub skill_mean: f64,
    pub skill_sd: f64,
    pub need_mean: f64,
    pub need_sd: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_demos: 100,
            n_train: 800,
            n_test: 2000,
            rank: 4,
            gamma: 0.1,
            base_mean: 0.0,
            base_sd: 1.0,
            skill_mean: 0.0,
            skill_sd: 0.15,
            need_mean: 0.5,
            need_sd: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub base: f64,
    pub need: Vec<f64>,
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct World {
    params: WorldParams,
    /// Row-major `n_demos x rank`.
    skills: Vec<f64>,
    train: Vec<Question>,
    test: Vec<Question>,
    train_ids: Vec<u64>,
    test_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorldError {
    #[error("a world needs at least 2 demonstrations, got {0}")]
    TooFewDemos(usize),
    #[error("a world needs at least 1 training question")]
    NoTrainingQuestions,
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("{0} must be a finite, non-negative number")]
    BadScale(&'static str),
    #[error("skill vector {index} has length {len}, expected {rank}")]
    SkillShape { index: usize, len: usize, rank: usize },
    #[error("question need vector has length {len}, expected {rank}")]
    NeedShape { len: usize, rank: usize },
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl World {
    pub fn new(params: WorldParams) -> Result<Self, WorldError> {
        Self::check(&params)?;
        let skills = (0..params.n_demos as u64)
            .flat_map(|i| {
                let mut rng = derive_indexed(params.seed, b"demo", i);
                let n = Normal::new(params.skill_mean, params.skill_sd).expect("checked scale");
                (0..params.rank).map(move |_| n.sample(&mut rng))
            })
            .collect();
        let train_ids: Vec<u64> = (0..params.n_train as u64).collect();
        let test_ids: Vec<u64> =
            (params.n_train as u64..(params.n_train + params.n_test) as u64).collect();
        let mut world = Self {
            train: Vec::new(),
            test: Vec::new(),
            params,
            skills,
            train_ids: Vec::new(),
            test_ids: Vec::new(),
        };
        world.train = world.questions(&train_ids);
        world.test = world.questions(&test_ids);
        world.train_ids = train_ids;
        world.test_ids = test_ids;
        Ok(world)
    }

    /// A world with hand-built demonstrations and questions. `params` still
    /// drives [`World::question`] (and therefore expected-risk estimates).
    pub fn from_parts(
        params: WorldParams,
        skills: Vec<Vec<f64>>,
        train: Vec<Question>,
        test: Vec<Question>,
    ) -> Result<Self, WorldError> {
        let rank = params.rank;
        if skills.len() < 2 {
            return Err(WorldError::TooFewDemos(skills.len()));
        }
        if train.is_empty() {
            return Err(WorldError::NoTrainingQuestions);
        }
        if let Some((index, z)) = skills.iter().enumerate().find(|(_, z)| z.len() != rank) {
            return Err(WorldError::SkillShape {
                index,
                len: z.len(),
                rank,
            });
        }
        if let Some(q) = train.iter().chain(&test).find(|q| q.need.len() != rank) {
            return Err(WorldError::NeedShape {
                len: q.need.len(),
                rank,
            });
        }
        let params = WorldParams {
            n_demos: skills.len(),
            n_train: train.len(),
            n_test: test.len(),
            ..params
        };
        Self::check(&params)?;
        let n_train = train.len() as u64;
        Ok(Self {
            train_ids: (0..n_train).collect(),
            test_ids: (n_train..n_train + test.len() as u64).collect(),
            skills: skills.concat(),
            params,
            train,
            test,
        })
    }

    fn check(p: &WorldParams) -> Result<(), WorldError> {
        if p.n_demos < 2 {
            return Err(WorldError::TooFewDemos(p.n_demos));
        }
        if p.n_train == 0 {
            return Err(WorldError::NoTrainingQuestions);
        }
        if p.rank == 0 {
            return Err(WorldError::ZeroRank);
        }
        for (name, v) in [
            ("gamma", p.gamma),
            ("base_sd", p.base_sd),
            ("skill_sd", p.skill_sd),
            ("need_sd", p.need_sd),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(WorldError::BadScale(name));
            }
        }
        for (name, v) in [
            ("base_mean", p.base_mean),
            ("skill_mean", p.skill_mean),
            ("need_mean", p.need_mean),
        ] {
            if !v.is_finite() {
                return Err(WorldError::BadScale(name));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> &WorldParams {
        &self.params
    }

    pub fn train_ids(&self) -> &[u64] {
        &self.train_ids
    }

    pub fn test_ids(&self) -> &[u64] {
        &self.test_ids
    }

    pub fn skill(&self, demo: usize) -> &[f64] {
        let r = self.params.rank;
        &self.skills[demo * r..(demo + 1) * r]
    }

    /// The question with identifier `id`, derived from `(seed, id)`.
    pub fn question(&self, id: u64) -> Question {
        let p = &self.params;
        let mut rng = derive_indexed(p.seed, b"question", id);
        let base = Normal::new(p.base_mean, p.base_sd).expect("checked scale");
        let need = Normal::new(p.need_mean, p.need_sd).expect("checked scale");
        Question {
            base: base.sample(&mut rng),
            need: (0..p.rank).map(|_| need.sample(&mut rng)).collect(),
            threshold: rng.random::<f64>(),
        }
    }

    fn questions(&self, ids: &[u64]) -> Vec<Question> {
        ids.iter().map(|&id| self.question(id)).collect()
    }

    /// Copy of this world whose training split is replaced by the given
    /// question ids. Ids must not overlap the test split.
    pub fn with_train_ids(&self, ids: Vec<u64>) -> Self {
        debug_assert!(ids.iter().all(|id| !self.test_ids.contains(id)));
        Self {
            train: self.questions(&ids),
            train_ids: ids,
            ..self.clone()
        }
    }

    /// The `k`-th disjoint block of `n` fresh training ids drawn from the
    /// re-partition family.
    pub fn repartition(&self, k: u64, n: usize) -> Self {
        let start = REPARTITION_BASE + k * n as u64;
        self.with_train_ids((start..start + n as u64).collect())
    }

    /// Summed skill of the distinct demos of `pre` and its duplicate count.
    fn aggregate(&self, pre: &PrePrompt) -> (Vec<f64>, usize) {
        let mut distinct: Vec<u32> = pre.indices().to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        let mut total = vec![0.0; self.params.rank];
        for &i in &distinct {
            for (t, z) in total.iter_mut().zip(self.skill(i as usize)) {
                *t += z;
            }
        }
        (total, pre.len() - distinct.len())
    }

    fn logit(&self, skill: &[f64], duplicates: usize, q: &Question) -> f64 {
        let contribution: f64 = skill.iter().zip(&q.need).map(|(z, n)| z * n).sum();
        q.base + contribution - self.params.gamma * duplicates as f64
    }

    /// Probability that `pre` answers `q` correctly. Depends only on the set
    /// of distinct demos in `pre` and on its number of duplicates.
    pub fn accuracy(&self, pre: &PrePrompt, q: &Question) -> f64 {
        let (skill, dup) = self.aggregate(pre);
        logistic(self.logit(&skill, dup, q))
    }

    /// Per-question accuracies on a split.
    pub fn accuracies(&self, pre: &PrePrompt, split: Split) -> Vec<f64> {
        let (skill, dup) = self.aggregate(pre);
        self.split(split)
            .iter()
            .map(|q| logistic(self.logit(&skill, dup, q)))
            .collect()
    }

    pub fn split(&self, split: Split) -> &[Question] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    fn outcomes(&self, pre: &PrePrompt, questions: &[Question]) -> Vec<bool> {
        let (skill, dup) = self.aggregate(pre);
        questions
            .iter()
            .map(|q| q.threshold < logistic(self.logit(&skill, dup, q)))
            .collect()
    }

    pub fn eval_train(&self, pre: &PrePrompt) -> Result<EvalReport, EvalError> {
        self.evaluate(pre, Split::Train)
    }

    pub fn eval_test(&self, pre: &PrePrompt) -> Result<EvalReport, EvalError> {
        self.evaluate(pre, Split::Test)
    }

    /// Monte Carlo estimate of the expected exact match of `pre` over `m`
    /// fresh questions (block 0 of the expected-risk family).
    pub fn eval_true(&self, pre: &PrePrompt, m: usize) -> Result<f64, EvalError> {
        self.eval_true_block(pre, m, 0)
    }

    /// As [`World::eval_true`], on the `block`-th disjoint run of `m` fresh
    /// questions; distinct blocks give independent estimates.
    ///
    /// Averages `acc_j` rather than the 0/1 outcomes: both have expectation
    /// equal to the expected exact match, the former with lower variance.
    pub fn eval_true_block(&self, pre: &PrePrompt, m: usize, block: u64) -> Result<f64, EvalError> {
        check_indices(pre, self.params.n_demos)?;
        let (skill, dup) = self.aggregate(pre);
        let start = TRUE_RISK_BASE + block * m as u64;
        // collect, then sum in order: a parallel float reduction is not
        // reproducible bit for bit
        let accs: Vec<f64> = (start..start + m as u64)
            .into_par_iter()
            .map(|id| logistic(self.logit(&skill, dup, &self.question(id))))
            .collect();
        Ok(accs.iter().sum::<f64>() / m as f64)
    }
}

impl Evaluator for World {
    fn cardinality(&self) -> usize {
        self.params.n_demos
    }

    fn evaluate(&self, pre: &PrePrompt, split: Split) -> Result<EvalReport, EvalError> {
        check_indices(pre, self.params.n_demos)?;
        let questions = self.split(split);
        if questions.is_empty() {
            return Err(EvalError::ScoreOutOfRange {
                correct: 0,
                total: 0,
            });
        }
        Ok(EvalReport::from_outcomes(self.outcomes(pre, questions)))
    }

    fn is_cheap(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;
    use crate::space::SearchSpace;

    fn small() -> World {
        World::new(WorldParams {
            seed: 11,
            n_demos: 30,
            n_train: 200,
            n_test: 300,
            ..WorldParams::default()
        })
        .unwrap()
    }

    fn q(base: f64, need: Vec<f64>, threshold: f64) -> Question {
        Question {
            base,
            need,
            threshold,
        }
    }

    #[test]
    fn regeneration_is_identical() {
        let (a, b) = (small(), small());
        let mut rng = derive_stream(0, b"t");
        let sp = SearchSpace::new(5, 30).unwrap();
        for _ in 0..20 {
            let p = sp.sample(&mut rng);
            assert_eq!(a.eval_train(&p).unwrap(), b.eval_train(&p).unwrap());
            assert_eq!(a.eval_test(&p).unwrap(), b.eval_test(&p).unwrap());
        }
    }

    #[test]
    fn partitions_are_disjoint() {
        let w = small();
        assert!(w.train_ids().iter().all(|id| !w.test_ids().contains(id)));
        let r = w.repartition(3, 200);
        assert!(r.train_ids().iter().all(|id| *id >= REPARTITION_BASE && *id < TRUE_RISK_BASE));
    }

    #[test]
    fn zero_skills_make_prompt_irrelevant() {
        let params = WorldParams {
            rank: 2,
            gamma: 0.0,
            ..WorldParams::default()
        };
        let base = World::new(params.clone()).unwrap();
        let w = World::from_parts(
            params,
            vec![vec![0.0, 0.0]; 10],
            base.split(Split::Train)[..50].to_vec(),
            vec![],
        )
        .unwrap();
        let r0 = w.eval_train(&PrePrompt::new(vec![0, 1, 2])).unwrap();
        for p in [vec![3, 3, 3], vec![9], vec![4, 5, 6, 7, 8]] {
            assert_eq!(w.eval_train(&PrePrompt::new(p)).unwrap(), r0);
        }
    }

    #[test]
    fn larger_total_skill_dominates_per_question() {
        let params = WorldParams {
            rank: 1,
            gamma: 0.0,
            ..WorldParams::default()
        };
        let skills = vec![vec![0.1], vec![0.2], vec![0.5], vec![0.7]];
        let questions: Vec<Question> = (0..40)
            .map(|j| q(j as f64 / 10.0 - 2.0, vec![0.1 + j as f64 / 20.0], 0.5))
            .collect();
        let w = World::from_parts(params, skills, questions.clone(), vec![]).unwrap();
        let (weak, strong) = (PrePrompt::new(vec![0, 1]), PrePrompt::new(vec![2, 3]));
        for question in &questions {
            assert!(w.accuracy(&strong, question) >= w.accuracy(&weak, question));
        }
    }

    #[test]
    fn accuracy_is_order_and_duplicate_aware() {
        let w = small();
        let question = w.question(5);
        let p = PrePrompt::new(vec![3, 7, 1]);
        let perm = PrePrompt::new(vec![1, 3, 7]);
        assert_eq!(w.accuracy(&p, &question), w.accuracy(&perm, &question));

        let no_penalty = World::new(WorldParams {
            gamma: 0.0,
            ..w.params().clone()
        })
        .unwrap();
        assert_eq!(
            no_penalty.accuracy(&PrePrompt::new(vec![4, 4]), &question),
            no_penalty.accuracy(&PrePrompt::new(vec![4]), &question)
        );
        // with a penalty the duplicate costs exactly gamma in logit space
        let (a, b) = (
            w.accuracy(&PrePrompt::new(vec![4, 4]), &question),
            w.accuracy(&PrePrompt::new(vec![4]), &question),
        );
        let logit = |x: f64| (x / (1.0 - x)).ln();
        assert!((logit(b) - logit(a) - w.params().gamma).abs() < 1e-9);
    }

    #[test]
    fn zero_logit_is_one_half() {
        let params = WorldParams {
            rank: 1,
            ..WorldParams::default()
        };
        let w = World::from_parts(
            params,
            vec![vec![0.0], vec![0.0]],
            vec![q(0.0, vec![1.0], 0.3)],
            vec![],
        )
        .unwrap();
        assert_eq!(w.accuracy(&PrePrompt::new(vec![0]), &w.split(Split::Train)[0]), 0.5);
    }

    #[test]
    fn saturated_world_is_always_right() {
        let params = WorldParams {
            rank: 1,
            ..WorldParams::default()
        };
        let train: Vec<Question> = (0..100).map(|j| q(1e3, vec![0.0], j as f64 / 100.0)).collect();
        let w = World::from_parts(params, vec![vec![1.0], vec![-1.0]], train, vec![]).unwrap();
        let r = w.eval_train(&PrePrompt::new(vec![1, 1])).unwrap();
        assert_eq!(r.correct, r.total);
        assert!(w.eval_test(&PrePrompt::new(vec![0])).is_err());
    }

    #[test]
    fn out_of_range_prompt_rejected() {
        let w = small();
        assert_eq!(
            w.eval_train(&PrePrompt::new(vec![0, 30])),
            Err(EvalError::IndexOutOfRange {
                index: 30,
                cardinality: 30
            })
        );
    }

    #[test]
    fn true_risk_blocks_agree() {
        let w = small();
        let p = PrePrompt::new(vec![1, 2, 3, 4]);
        let a = w.eval_true_block(&p, 100_000, 0).unwrap();
        let b = w.eval_true_block(&p, 100_000, 1).unwrap();
        assert_ne!(a, b);
        assert!((a - b).abs() < 0.01);
    }

    #[test]
    fn constructor_validation() {
        let bad = |p: WorldParams| World::new(p).unwrap_err();
        assert_eq!(
            bad(WorldParams {
                n_demos: 1,
                ..WorldParams::default()
            }),
            WorldError::TooFewDemos(1)
        );
        assert_eq!(
            bad(WorldParams {
                n_train: 0,
                ..WorldParams::default()
            }),
            WorldError::NoTrainingQuestions
        );
        assert_eq!(
            bad(WorldParams {
                gamma: -1.0,
                ..WorldParams::default()
            }),
            WorldError::BadScale("gamma")
        );
    }
}
