//! Search space and the pre-prompt optimization variable.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The categorical domain `{0, ..., cardinality-1}^shots`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SearchSpace {
    shots: usize,
    cardinality: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpaceError {
    #[error("shot count must be at least 1")]
    NoShots,
    #[error("cardinality must be at least 2, got {0}")]
    Cardinality(usize),
}

impl SearchSpace {
    pub fn new(shots: usize, cardinality: usize) -> Result<Self, SpaceError> {
        if shots == 0 {
            return Err(SpaceError::NoShots);
        }
        if cardinality < 2 {
            return Err(SpaceError::Cardinality(cardinality));
        }
        Ok(Self { shots, cardinality })
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn cardinality(&self) -> usize {
        self.cardinality
    }

    /// Natural log of `cardinality^shots`.
    pub fn ln_size(&self) -> f64 {
        self.shots as f64 * (self.cardinality as f64).ln()
    }

    /// Uniform draw from the whole space.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PrePrompt {
        PrePrompt(
            (0..self.shots)
                .map(|_| rng.random_range(0..self.cardinality) as u32)
                .collect(),
        )
    }

    /// Checks the length and range invariants of `pre` against this space.
    pub fn validate(&self, pre: &PrePrompt) -> Result<(), Violation> {
        if pre.len() != self.shots {
            return Err(Violation::Length {
                expected: self.shots,
                actual: pre.len(),
            });
        }
        match pre
            .indices()
            .iter()
            .position(|&i| i as usize >= self.cardinality)
        {
            Some(position) => Err(Violation::OutOfRange {
                position,
                value: pre.indices()[position],
                cardinality: self.cardinality,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("length {actual} != {expected}")]
    Length { expected: usize, actual: usize },
    #[error("index {value} at position {position} is outside [0, {cardinality})")]
    OutOfRange {
        position: usize,
        value: u32,
        cardinality: usize,
    },
}

/// An ordered list of demonstration indices (0-based). Duplicates are kept.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrePrompt(Vec<u32>);

impl PrePrompt {
    pub fn new(indices: Vec<u32>) -> Self {
        Self(indices)
    }

    pub fn indices(&self) -> &[u32] {
        &self.0
    }

    pub fn into_indices(self) -> Vec<u32> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_index(&self) -> Option<u32> {
        self.0.iter().copied().max()
    }

    /// Number of coordinates where `self` and `other` differ. Lengths must match.
    pub fn hamming(&self, other: &PrePrompt) -> usize {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

impl From<Vec<u32>> for PrePrompt {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

/// Single-line form: space-separated decimal indices.
impl fmt::Display for PrePrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, i) in self.0.iter().enumerate() {
            if k > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{i}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParsePrePromptError {
    #[error("empty pre-prompt line")]
    Empty,
    #[error("token {position} ({token:?}) is not a non-negative integer")]
    BadToken { position: usize, token: String },
}

impl FromStr for PrePrompt {
    type Err = ParsePrePromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let indices = s
            .split_whitespace()
            .enumerate()
            .map(|(position, tok)| {
                tok.parse::<u32>()
                    .map_err(|_| ParsePrePromptError::BadToken {
                        position,
                        token: tok.chars().take(32).collect(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if indices.is_empty() {
            return Err(ParsePrePromptError::Empty);
        }
        Ok(Self(indices))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn space(s: usize, d: usize) -> SearchSpace {
        SearchSpace::new(s, d).unwrap()
    }

    #[test]
    fn validate_in_range() {
        assert!(space(3, 10).validate(&vec![0, 1, 2].into()).is_ok());
    }

    #[test]
    fn validate_names_offending_position() {
        let err = space(2, 10).validate(&vec![0, 10].into()).unwrap_err();
        assert_eq!(
            err,
            Violation::OutOfRange {
                position: 1,
                value: 10,
                cardinality: 10
            }
        );
    }

    #[test]
    fn validate_length_mismatch() {
        let err = space(3, 10).validate(&vec![0, 1].into()).unwrap_err();
        assert_eq!(err, Violation::Length { expected: 3, actual: 2 });
        assert_eq!(err.to_string(), "length 2 != 3");
    }

    #[test]
    fn degenerate_spaces_rejected() {
        assert_eq!(SearchSpace::new(0, 10), Err(SpaceError::NoShots));
        assert_eq!(SearchSpace::new(2, 1), Err(SpaceError::Cardinality(1)));
    }

    #[test]
    fn parse_line() {
        let p: PrePrompt = " 3 1  4\n".parse().unwrap();
        assert_eq!(p.indices(), &[3, 1, 4]);
        assert_eq!(p.to_string(), "3 1 4");
        assert!("".parse::<PrePrompt>().is_err());
        assert!("1 -2".parse::<PrePrompt>().is_err());
        assert!("1 x".parse::<PrePrompt>().is_err());
    }

    proptest! {
        #[test]
        fn line_form_roundtrips(v in proptest::collection::vec(any::<u32>(), 1..20)) {
            let p = PrePrompt::new(v);
            prop_assert_eq!(p.to_string().parse::<PrePrompt>().unwrap(), p);
        }

        #[test]
        fn samples_are_valid(seed in any::<u64>(), s in 1usize..20, d in 2usize..1000) {
            let sp = space(s, d);
            let mut rng = crate::rng::derive_stream(seed, b"test");
            prop_assert!(sp.validate(&sp.sample(&mut rng)).is_ok());
        }
    }
}
