use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::AttributionError;

/// Largest player count supported by the bitmask subset representation.
pub const MAX_PLAYERS: usize = 64;

/// Binary mask rows over `n` events; 1 keeps an event, 0 masks it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    pub n: usize,
    pub rows: Vec<Vec<u8>>,
    /// True when `rows` is the full powerset.
    pub exact: bool,
}

impl MaskMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Subset of players as a bitmask, bit `i` for player `i`.
pub fn mask_to_bits(mask: &[u8]) -> u64 {
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m != 0)
        .fold(0u64, |acc, (i, _)| acc | (1u64 << i))
}

pub fn bits_to_mask(bits: u64, n: usize) -> Vec<u8> {
    (0..n).map(|i| ((bits >> i) & 1) as u8).collect()
}

/// All `2^n` rows in binary counting order, first column most significant:
/// `n = 2` gives `[0,0], [0,1], [1,0], [1,1]`.
pub fn mask_powerset(n: usize, exact_limit: usize) -> Result<MaskMatrix, AttributionError> {
    if n == 0 {
        return Err(AttributionError::NoEvents);
    }
    if n > exact_limit {
        return Err(AttributionError::TooManyForExact { n, limit: exact_limit });
    }
    let rows = (0u64..1 << n)
        .map(|r| (0..n).map(|j| ((r >> (n - 1 - j)) & 1) as u8).collect())
        .collect();
    Ok(MaskMatrix { n, rows, exact: true })
}

/// `m` distinct rows drawn uniformly from the powerset, always including
/// the all-zeros and all-ones rows. Falls back to the full powerset when it
/// has no more than `m` rows.
pub fn sampled_masks(n: usize, m: usize, seed: u64) -> Result<MaskMatrix, AttributionError> {
    if n == 0 {
        return Err(AttributionError::NoEvents);
    }
    if n > MAX_PLAYERS {
        return Err(AttributionError::TooManyPlayers(n));
    }
    if n < MAX_PLAYERS && (1u64 << n) <= m as u64 {
        return mask_powerset(n, n);
    }
    let full = if n == MAX_PLAYERS { u64::MAX } else { (1u64 << n) - 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(m);
    let mut picked = vec![0u64, full];
    seen.insert(0u64);
    seen.insert(full);
    while picked.len() < m.max(2) {
        let bits = rng.random::<u64>() & full;
        if seen.insert(bits) {
            picked.push(bits);
        }
    }
    let rows = picked.into_iter().map(|b| bits_to_mask(b, n)).collect();
    Ok(MaskMatrix { n, rows, exact: false })
}
