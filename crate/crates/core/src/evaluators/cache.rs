use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::{EvalError, EvalReport, Evaluator, Split};
use crate::space::PrePrompt;

type Slot = Arc<Mutex<Option<EvalReport>>>;

/// Memoizes an evaluator by `(split, ordered indices)`.
///
/// Concurrent requests for the same key wait on a per-key lock, so the inner
/// evaluator runs at most once per key. Failures are not cached.
pub struct Cached<E> {
    inner: E,
    slots: Mutex<HashMap<(Split, Vec<u32>), Slot>>,
    misses: AtomicU64,
}

impl<E: Evaluator> Cached<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            slots: Mutex::new(HashMap::new()),
            misses: AtomicU64::new(0),
        }
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    /// Number of times the inner evaluator was invoked.
    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }
}

impl<E: Evaluator> Evaluator for Cached<E> {
    fn cardinality(&self) -> usize {
        self.inner.cardinality()
    }

    fn evaluate(&self, pre: &PrePrompt, split: Split) -> Result<EvalReport, EvalError> {
        let slot = {
            let mut slots = self.slots.lock().expect("cache lock poisoned");
            slots
                .entry((split, pre.indices().to_vec()))
                .or_default()
                .clone()
        };
        let mut guard = slot.lock().expect("cache slot poisoned");
        if let Some(report) = guard.as_ref() {
            return Ok(report.clone());
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let report = self.inner.evaluate(pre, split)?;
        *guard = Some(report.clone());
        Ok(report)
    }

    fn is_cheap(&self) -> bool {
        self.inner.is_cheap()
    }
}
