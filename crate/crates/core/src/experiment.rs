//! Run and bench orchestration with their on-disk artifacts.
//!
//! A run directory holds `archive.jsonl`, `progress.jsonl`, `result.json`
//! and `curve.csv`. A bench directory holds `bench.json` and `bench.csv`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::Score;
use crate::config::{Backend, RunConfig};
use crate::driver::{run_observed, Feedback, RunError, RunResult};
use crate::evaluators::{EvalError, Evaluator, Split, World, WorldError, WorldParams};
use crate::optimizers::Algorithm;
use crate::rng::derive_seed;
use crate::space::PrePrompt;
use crate::stats::Quartiles;

pub const RESULT_SCHEMA: &str = "eppo.result/v1";
pub const SUITE_SCHEMA: &str = "eppo.suite/v1";
pub const BENCH_SCHEMA: &str = "eppo.bench/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDoc {
    pub schema: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub budget: u32,
    pub shots: usize,
    pub kappa: usize,
    pub bits_used: f64,
    pub recommendation: PrePrompt,
    pub train: Score,
    pub test: Option<Score>,
    pub archive_size: usize,
    pub feedback_trace: Vec<usize>,
}

/// The four files of a run, rendered in memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunArtifacts {
    pub archive_jsonl: String,
    pub progress_jsonl: String,
    pub result_json: String,
    pub curve_csv: String,
}

impl RunArtifacts {
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("archive.jsonl"), &self.archive_jsonl)?;
        fs::write(dir.join("progress.jsonl"), &self.progress_jsonl)?;
        fs::write(dir.join("result.json"), &self.result_json)?;
        fs::write(dir.join("curve.csv"), &self.curve_csv)
    }
}

/// Runs `cfg` and renders its artifacts.
///
/// The curve's test column is filled every step when `test_curve` is set
/// (evaluating the running recommendation whenever it changes) and left
/// empty otherwise. The final recommendation is always test-scored.
pub fn execute_run(
    cfg: &RunConfig,
    evaluator: &dyn Evaluator,
    test_curve: bool,
) -> Result<(RunResult, RunArtifacts), RunError> {
    let mut progress = String::new();
    let mut curve = String::from("step,best_train_em,test_em\n");
    let mut last_best: Option<(usize, String)> = None;
    let mut curve_err: Option<EvalError> = None;

    let result = run_observed(cfg, evaluator, Feedback::Scores, |view| {
        progress.push_str(&serde_json::to_string(view.record).expect("record serializes"));
        progress.push('\n');
        let entry = &view.archive.entries()[view.best];
        let test_cell = if test_curve && curve_err.is_none() {
            match &last_best {
                Some((i, cell)) if *i == view.best => cell.clone(),
                _ => match evaluator.evaluate(&entry.candidate, Split::Test) {
                    Ok(r) => {
                        let cell = r.accuracy().to_string();
                        last_best = Some((view.best, cell.clone()));
                        cell
                    }
                    Err(e) => {
                        curve_err = Some(e);
                        String::new()
                    }
                },
            }
        } else {
            String::new()
        };
        curve.push_str(&format!(
            "{},{},{}\n",
            view.record.step,
            entry.score().value(),
            test_cell
        ));
    })?;
    let fail = |e: EvalError, r: &RunResult| RunError {
        step: cfg.budget,
        kind: e.into(),
        partial: r.archive.clone(),
    };
    if let Some(e) = curve_err {
        return Err(fail(e, &result));
    }
    let test = evaluator
        .evaluate(&result.recommendation, Split::Test)
        .map(|r| r.score())
        .map_err(|e| fail(e, &result))?;

    let doc = ResultDoc {
        schema: RESULT_SCHEMA.into(),
        algorithm: cfg.algorithm,
        seed: cfg.seed,
        budget: cfg.budget,
        shots: cfg.shots,
        kappa: cfg.algorithm.kappa(),
        bits_used: result.bits_used,
        recommendation: result.recommendation.clone(),
        train: result.recommendation_score,
        test: Some(test),
        archive_size: result.archive.len(),
        feedback_trace: result.feedback_trace.clone(),
    };
    let artifacts = RunArtifacts {
        archive_jsonl: result.archive.to_jsonl(),
        progress_jsonl: progress,
        result_json: serde_json::to_string_pretty(&doc).expect("result serializes") + "\n",
        curve_csv: curve,
    };
    Ok((result, artifacts))
}

/// Resolves the configured backend, runs, and writes artifacts to `out`.
pub fn run_to_dir(cfg: &RunConfig, backend: &Backend, out: &Path) -> Result<RunResult, ExperimentError> {
    let (result, art) = execute_run(cfg, backend.evaluator(), backend.evaluator().is_cheap())?;
    art.write_to(out)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Suite {
    #[serde(default = "suite_schema")]
    pub schema: String,
    pub seed: u64,
    pub algorithms: Vec<Algorithm>,
    pub shots: Vec<usize>,
    pub budgets: Vec<u32>,
    pub replicates: u32,
    #[serde(default)]
    pub world: WorldParams,
    /// Draw a fresh world per replicate (shared by every cell).
    #[serde(default = "yes")]
    pub vary_world: bool,
}

fn suite_schema() -> String {
    SUITE_SCHEMA.into()
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub algorithm: Algorithm,
    pub shots: usize,
    pub budget: u32,
    pub train: Quartiles,
    pub test: Quartiles,
    pub gap: Quartiles,
    /// Per-replicate values, in replicate order.
    pub train_em: Vec<f64>,
    pub test_em: Vec<f64>,
}

/// Whether the largest budget beats the smallest on median test EM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetFlag {
    pub algorithm: Algorithm,
    pub shots: usize,
    pub from: u32,
    pub to: u32,
    /// `+`, `-` or `=`.
    pub flag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema: String,
    pub suite: Suite,
    pub cells: Vec<BenchCell>,
    pub budget_flags: Vec<BudgetFlag>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "algorithm,shots,budget,train_q1,train_median,train_q3,test_q1,test_median,test_q3,gap_q1,gap_median,gap_q3\n",
        );
        for c in &self.cells {
            let q = |q: &Quartiles| format!("{},{},{}", q.q1, q.median, q.q3);
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.algorithm,
                c.shots,
                c.budget,
                q(&c.train),
                q(&c.test),
                q(&c.gap)
            ));
        }
        out
    }

    pub fn cell(&self, algorithm: Algorithm, shots: usize, budget: u32) -> Option<&BenchCell> {
        self.cells
            .iter()
            .find(|c| c.algorithm == algorithm && c.shots == shots && c.budget == budget)
    }

    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("bench.json"),
            serde_json::to_string_pretty(self).expect("report serializes") + "\n",
        )?;
        fs::write(dir.join("bench.csv"), self.to_csv())
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid suite: {0}")]
    Suite(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Suite {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.schema != SUITE_SCHEMA {
            return Err(ExperimentError::Suite(format!(
                "unsupported schema {:?}, expected {SUITE_SCHEMA:?}",
                self.schema
            )));
        }
        let empty = [
            ("algorithms", self.algorithms.is_empty()),
            ("shots", self.shots.is_empty()),
            ("budgets", self.budgets.is_empty()),
            ("replicates", self.replicates == 0),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(ExperimentError::Suite(format!("{name} must not be empty")));
        }
        if self.budgets.contains(&0) || self.shots.contains(&0) {
            return Err(ExperimentError::Suite("budgets and shots must be positive".into()));
        }
        Ok(())
    }

    fn world_for(&self, replicate: u32) -> WorldParams {
        let mut w = self.world.clone();
        if self.vary_world {
            w.seed = derive_seed(self.seed, b"bench-world", replicate as u64);
        }
        w
    }
}

/// Runs every (algorithm, shots, budget, replicate) combination on the
/// synthetic world. Replicates run concurrently.
pub fn bench(suite: &Suite) -> Result<BenchReport, ExperimentError> {
    suite.validate()?;
    let worlds = (0..suite.replicates)
        .into_par_iter()
        .map(|r| World::new(suite.world_for(r)))
        .collect::<Result<Vec<_>, _>>()?;

    let mut cells = Vec::new();
    for &algorithm in &suite.algorithms {
        for &shots in &suite.shots {
            for &budget in &suite.budgets {
                let runs = (0..suite.replicates)
                    .into_par_iter()
                    .map(|r| -> Result<(f64, f64), ExperimentError> {
                        let w = &worlds[r as usize];
                        let seed = derive_seed(suite.seed, b"bench-run", r as u64);
                        let cfg = RunConfig::synthetic(seed, budget, algorithm, shots, w.params().clone());
                        let res = crate::driver::run(&cfg, w)?;
                        let test = w.eval_test(&res.recommendation)?.accuracy();
                        Ok((res.recommendation_score.value(), test))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let train_em: Vec<f64> = runs.iter().map(|r| r.0).collect();
                let test_em: Vec<f64> = runs.iter().map(|r| r.1).collect();
                let gap: Vec<f64> = runs.iter().map(|r| r.0 - r.1).collect();
                cells.push(BenchCell {
                    algorithm,
                    shots,
                    budget,
                    train: Quartiles::of(&train_em).expect("replicates > 0"),
                    test: Quartiles::of(&test_em).expect("replicates > 0"),
                    gap: Quartiles::of(&gap).expect("replicates > 0"),
                    train_em,
                    test_em,
                });
            }
        }
    }

    let mut budget_flags = Vec::new();
    let lo = *suite.budgets.iter().min().expect("validated");
    let hi = *suite.budgets.iter().max().expect("validated");
    if lo != hi {
        for &algorithm in &suite.algorithms {
            for &shots in &suite.shots {
                let find = |b| {
                    cells
                        .iter()
                        .find(|c: &&BenchCell| c.algorithm == algorithm && c.shots == shots && c.budget == b)
                        .expect("cell exists")
                        .test
                        .median
                };
                let (a, b) = (find(lo), find(hi));
                let flag = if b > a { "+" } else if b < a { "-" } else { "=" };
                budget_flags.push(BudgetFlag {
                    algorithm,
                    shots,
                    from: lo,
                    to: hi,
                    flag: flag.into(),
                });
            }
        }
    }

    Ok(BenchReport {
        schema: BENCH_SCHEMA.into(),
        suite: suite.clone(),
        cells,
        budget_flags,
    })
}
