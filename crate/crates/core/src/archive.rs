//! Append-only log of every candidate evaluated during a run.

use std::cmp::Ordering;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::PrePrompt;

/// An exact score `correct / total`. Ordering compares the fractions exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Score {
    pub correct: u32,
    pub total: u32,
}

impl Score {
    /// `None` when `total == 0` or `correct > total`.
    pub fn new(correct: u32, total: u32) -> Option<Self> {
        (total > 0 && correct <= total).then_some(Self { correct, total })
    }

    pub fn value(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

impl PartialOrd for Score {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Score {
    fn cmp(&self, other: &Self) -> Ordering {
        let lhs = self.correct as u64 * other.total as u64;
        let rhs = other.correct as u64 * self.total as u64;
        lhs.cmp(&rhs)
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.correct, self.total)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub step: u32,
    #[serde(rename = "indices")]
    pub candidate: PrePrompt,
    pub correct: u32,
    pub total: u32,
    pub chosen: bool,
}

impl ArchiveEntry {
    pub fn score(&self) -> Score {
        Score {
            correct: self.correct,
            total: self.total,
        }
    }
}

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: invalid score {correct}/{total}")]
    BadScore { line: usize, correct: u32, total: u32 },
    #[error("line {line}: step {step} out of order (previous {previous})")]
    StepOrder { line: usize, step: u32, previous: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Archive {
    entries: Vec<ArchiveEntry>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry. Steps must be non-decreasing and start at 1.
    pub(crate) fn push(&mut self, entry: ArchiveEntry) {
        debug_assert!(entry.step >= 1);
        debug_assert!(self.entries.last().is_none_or(|e| e.step <= entry.step));
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of the best-scored entry; ties go to the earliest entry, i.e.
    /// earliest step and then lowest batch position.
    pub fn best_index(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (k, e) in self.entries.iter().enumerate() {
            match best {
                Some(b) if self.entries[b].score() >= e.score() => {}
                _ => best = Some(k),
            }
        }
        best
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    /// Parses the JSONL form. Blank lines are skipped.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, ArchiveError> {
        let mut archive = Archive::new();
        for (k, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry = parse_entry(&line, k + 1)?;
            if let Some(prev) = archive.entries.last() {
                if entry.step < prev.step {
                    return Err(ArchiveError::StepOrder {
                        line: k + 1,
                        step: entry.step,
                        previous: prev.step,
                    });
                }
            }
            archive.entries.push(entry);
        }
        Ok(archive)
    }
}

/// Parses and checks a single archive line.
pub fn parse_entry(line: &str, line_no: usize) -> Result<ArchiveEntry, ArchiveError> {
    let entry: ArchiveEntry = serde_json::from_str(line).map_err(|source| ArchiveError::Json {
        line: line_no,
        source,
    })?;
    if Score::new(entry.correct, entry.total).is_none() {
        return Err(ArchiveError::BadScore {
            line: line_no,
            correct: entry.correct,
            total: entry.total,
        });
    }
    if entry.step == 0 {
        return Err(ArchiveError::StepOrder {
            line: line_no,
            step: 0,
            previous: 0,
        });
    }
    Ok(entry)
}
