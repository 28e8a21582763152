//! Shapley values of a cooperative game over `n` players, exactly by
//! subset enumeration or approximately by permutation sampling.
//!
//! Coalitions are bitmasks with bit `i` set when player `i` is present.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::mask::MAX_PLAYERS;
use super::AttributionError;

/// Exact Shapley values. Evaluates `value` once per subset (`2^n` calls)
/// and sums weighted marginal contributions.
pub fn shapley_exact<F>(n: usize, exact_limit: usize, mut value: F) -> Result<Vec<f64>, AttributionError>
where
    F: FnMut(u64) -> f64,
{
    if n == 0 {
        return Err(AttributionError::NoEvents);
    }
    if n > exact_limit || n >= MAX_PLAYERS {
        return Err(AttributionError::TooManyForExact { n, limit: exact_limit });
    }
    let table: Vec<f64> = (0u64..1 << n).map(&mut value).collect();
    shapley_from_table(n, &table)
}

/// Exact Shapley values from a value table indexed by coalition bitmask.
pub fn shapley_from_table(n: usize, table: &[f64]) -> Result<Vec<f64>, AttributionError> {
    if table.len() != 1 << n {
        return Err(AttributionError::Length {
            expected: 1 << n,
            got: table.len(),
        });
    }
    // weight[s] = s! (n - s - 1)! / n!
    let mut weight = vec![0.0; n];
    weight[0] = 1.0 / n as f64;
    for s in 1..n {
        weight[s] = weight[s - 1] * s as f64 / (n - s) as f64;
    }
    let mut phi = vec![0.0; n];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1u64 << i;
        let mut sum = 0.0;
        for s in 0u64..(1 << n) {
            if s & bit != 0 {
                continue;
            }
            let size = s.count_ones() as usize;
            sum += weight[size] * (table[(s | bit) as usize] - table[s as usize]);
        }
        *p = sum;
    }
    Ok(phi)
}

/// Monte-Carlo Shapley values: the mean marginal contribution of each
/// player over `n_samples` uniformly random orderings.
pub fn shapley_sampled<F>(
    n: usize,
    n_samples: usize,
    seed: u64,
    mut value: F,
) -> Result<Vec<f64>, AttributionError>
where
    F: FnMut(u64) -> f64,
{
    if n == 0 {
        return Err(AttributionError::NoEvents);
    }
    if n > MAX_PLAYERS {
        return Err(AttributionError::TooManyPlayers(n));
    }
    if n_samples == 0 {
        return Err(AttributionError::NoSamples);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut totals = vec![0.0; n];
    for _ in 0..n_samples {
        order.shuffle(&mut rng);
        let mut coalition = 0u64;
        let mut previous = value(coalition);
        for &player in &order {
            coalition |= 1 << player;
            let current = value(coalition);
            totals[player] += current - previous;
            previous = current;
        }
    }
    Ok(totals.into_iter().map(|t| t / n_samples as f64).collect())
}
