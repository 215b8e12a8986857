//! Categorical mutation operators.
//!
//! Every operator changes at least one coordinate, and every changed
//! coordinate takes a value different from the one it had.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::space::{PrePrompt, SearchSpace};

/// Power-law exponent for the heavy-tailed mutation strength.
pub const FASTGA_BETA: f64 = 1.5;

/// Learning rate of the log-normal self-adaptation.
pub const LOGNORMAL_TAU: f64 = 0.22;

/// Uniform draw from `[0, cardinality)` excluding `current`.
pub fn resample_value<R: Rng + ?Sized>(current: u32, cardinality: usize, rng: &mut R) -> u32 {
    debug_assert!(cardinality >= 2);
    let v = rng.random_range(0..cardinality as u32 - 1);
    if v >= current {
        v + 1
    } else {
        v
    }
}

/// Replaces the coordinates at `positions` with fresh different values.
fn change_positions<R: Rng + ?Sized>(
    parent: &PrePrompt,
    positions: impl IntoIterator<Item = usize>,
    space: &SearchSpace,
    rng: &mut R,
) -> PrePrompt {
    let mut child = parent.indices().to_vec();
    for pos in positions {
        child[pos] = resample_value(child[pos], space.cardinality(), rng);
    }
    PrePrompt::new(child)
}

/// Resamples each coordinate independently with probability `p`, conditioned
/// on at least one coordinate changing.
///
/// Rather than redrawing the whole Bernoulli mask until it is non-empty, the
/// number of changed coordinates is drawn from Binomial(s, p) truncated to
/// `k >= 1` and the positions are then chosen uniformly; by exchangeability the
/// two procedures have the same distribution, and this one terminates in
/// bounded time for tiny `p`.
pub fn mutate_fixed_rate<R: Rng + ?Sized>(
    parent: &PrePrompt,
    p: f64,
    space: &SearchSpace,
    rng: &mut R,
) -> PrePrompt {
    assert!(p > 0.0 && p <= 1.0, "mutation probability {p} outside (0, 1]");
    let s = parent.len();
    let k = sample_truncated_binomial(s, p, rng);
    change_positions(parent, index::sample(rng, s, k), space, rng)
}

/// Draws `k` from Binomial(n, p) conditioned on `k >= 1`.
fn sample_truncated_binomial<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> usize {
    if p >= 1.0 {
        return n;
    }
    if n == 1 {
        return 1;
    }
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    let mut log_w = Vec::with_capacity(n);
    let mut ln_choose = 0.0;
    for k in 1..=n {
        ln_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        log_w.push(ln_choose + k as f64 * lp + (n - k) as f64 * lq);
    }
    sample_log_weights(&log_w, rng) + 1
}

/// Index drawn with probability proportional to `exp(log_w[i])`.
fn sample_log_weights<R: Rng + ?Sized>(log_w: &[f64], rng: &mut R) -> usize {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    w.len() - 1
}

/// Fixed-rate mutation with `p` drawn uniformly from (0, 1] on every call.
pub fn mutate_portfolio<R: Rng + ?Sized>(
    parent: &PrePrompt,
    space: &SearchSpace,
    rng: &mut R,
) -> PrePrompt {
    let p = 1.0 - rng.random::<f64>();
    mutate_fixed_rate(parent, p, space, rng)
}

/// `P(k)` for the heavy-tailed strength distribution over `{1..=s}`.
pub fn fastga_strength_pmf(s: usize) -> Vec<f64> {
    let w: Vec<f64> = (1..=s).map(|k| (k as f64).powf(-FASTGA_BETA)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Changes exactly `k` distinct coordinates, `k` drawn from a power law with
/// exponent [`FASTGA_BETA`] over `{1..=s}`.
pub fn mutate_fastga<R: Rng + ?Sized>(
    parent: &PrePrompt,
    space: &SearchSpace,
    rng: &mut R,
) -> PrePrompt {
    let s = parent.len();
    let log_w: Vec<f64> = (1..=s)
        .map(|k| -FASTGA_BETA * (k as f64).ln())
        .collect();
    let k = sample_log_weights(&log_w, rng) + 1;
    change_positions(parent, index::sample(rng, s, k), space, rng)
}

/// Decaying mutation rate: `max(1/s, c/(c+t))` with `c = s/2`.
pub fn lengler_rate(shots: usize, t: u64) -> f64 {
    let floor = 1.0 / shots as f64;
    let c = shots as f64 / 2.0;
    floor.max(c / (c + t as f64))
}

pub fn mutate_lengler<R: Rng + ?Sized>(
    parent: &PrePrompt,
    t: u64,
    space: &SearchSpace,
    rng: &mut R,
) -> PrePrompt {
    mutate_fixed_rate(parent, lengler_rate(parent.len(), t), space, rng)
}

/// Clamp range for the self-adapted rate. For `s = 1` both ends are 1.
pub fn lognormal_bounds(shots: usize) -> (f64, f64) {
    let lo = 1.0 / shots as f64;
    (lo, lo.max(0.5))
}

/// One log-normal update of the rate for a given standard-normal draw `g`.
pub fn lognormal_rate(p: f64, g: f64, shots: usize) -> f64 {
    let (lo, hi) = lognormal_bounds(shots);
    (p * (LOGNORMAL_TAU * g).exp()).clamp(lo, hi)
}

/// Returns the mutant together with the proposed rate; the caller keeps the
/// rate only if the mutant wins its comparison.
pub fn mutate_lognormal<R: Rng + ?Sized>(
    p: f64,
    parent: &PrePrompt,
    space: &SearchSpace,
    rng: &mut R,
) -> (PrePrompt, f64) {
    let g: f64 = StandardNormal.sample(rng);
    let p_new = lognormal_rate(p, g, parent.len());
    (mutate_fixed_rate(parent, p_new, space, rng), p_new)
}
