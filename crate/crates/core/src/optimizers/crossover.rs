//! Recombination of two parents. Duplicates in the child are not filtered.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::PrePrompt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossoverKind {
    OnePoint,
    TwoPoint,
    /// Each coordinate copied from a uniformly chosen parent.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parent lengths differ: {0} vs {1}")]
pub struct LengthMismatch(pub usize, pub usize);

/// `a[..cut] ++ b[cut..]`.
pub fn one_point_at(a: &PrePrompt, b: &PrePrompt, cut: usize) -> PrePrompt {
    let mut child = a.indices()[..cut].to_vec();
    child.extend_from_slice(&b.indices()[cut..]);
    PrePrompt::new(child)
}

/// `a` with the segment `[lo, hi)` taken from `b`.
pub fn two_point_at(a: &PrePrompt, b: &PrePrompt, lo: usize, hi: usize) -> PrePrompt {
    let mut child = a.indices().to_vec();
    child[lo..hi].copy_from_slice(&b.indices()[lo..hi]);
    PrePrompt::new(child)
}

pub fn crossover<R: Rng + ?Sized>(
    a: &PrePrompt,
    b: &PrePrompt,
    kind: CrossoverKind,
    rng: &mut R,
) -> Result<PrePrompt, LengthMismatch> {
    if a.len() != b.len() {
        return Err(LengthMismatch(a.len(), b.len()));
    }
    let s = a.len();
    let child = match kind {
        // with a single coordinate there is no interior cut
        CrossoverKind::OnePoint | CrossoverKind::TwoPoint if s < 2 => a.clone(),
        CrossoverKind::OnePoint => one_point_at(a, b, rng.random_range(1..s)),
        CrossoverKind::TwoPoint if s == 2 => one_point_at(a, b, 1),
        CrossoverKind::TwoPoint => {
            let picked = rand::seq::index::sample(rng, s - 1, 2);
            let (x, y) = (picked.index(0) + 1, picked.index(1) + 1);
            two_point_at(a, b, x.min(y), x.max(y))
        }
        CrossoverKind::Uniform => PrePrompt::new(
            a.indices()
                .iter()
                .zip(b.indices())
                .map(|(&x, &y)| if rng.random::<bool>() { x } else { y })
                .collect(),
        ),
    };
    Ok(child)
}
