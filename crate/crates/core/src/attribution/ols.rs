//! Weighted least squares of masked accuracies on mask indicators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::mask::MaskMatrix;
use super::AttributionError;

/// Ridge added to the normal equations so rank-deficient designs still
/// solve.
pub const RIDGE: f64 = 1e-8;
/// Weight given to the empty and full coalitions under the Shapley kernel.
pub const KERNEL_ENDPOINT_WEIGHT: f64 = 1e6;

const REFINEMENT_STEPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    ShapleyKernel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsSolution {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley kernel weight of a coalition of `size` out of `n` players.
pub fn shapley_kernel_weight(n: usize, size: usize) -> f64 {
    if size == 0 || size == n {
        KERNEL_ENDPOINT_WEIGHT
    } else {
        (n - 1) as f64 / (binomial(n, size) * size as f64 * (n - size) as f64)
    }
}

/// Solves `acc ≈ φ₀ + Σ φᵢ maskᵢ` by weighted least squares.
///
/// The normal equations carry a ridge of [`RIDGE`] on the diagonal; a few
/// rounds of iterative refinement against the unregularized system remove
/// the ridge bias whenever the design has full column rank.
pub fn solve_weights(
    masks: &MaskMatrix,
    acc: &[f64],
    weighting: Weighting,
    with_intercept: bool,
) -> Result<OlsSolution, AttributionError> {
    let n = masks.n;
    let offset = usize::from(with_intercept);
    let p = n + offset;
    if masks.len() != acc.len() {
        return Err(AttributionError::Length {
            expected: masks.len(),
            got: acc.len(),
        });
    }
    if masks.len() < p {
        return Err(AttributionError::Underdetermined { rows: masks.len(), unknowns: p });
    }
    if acc.iter().any(|v| !v.is_finite()) {
        return Err(AttributionError::Numeric("non-finite accuracy".into()));
    }

    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    let mut design_row = vec![0.0; p];
    for (row, &y) in masks.rows.iter().zip(acc) {
        if row.len() != n {
            return Err(AttributionError::Length { expected: n, got: row.len() });
        }
        if with_intercept {
            design_row[0] = 1.0;
        }
        for (d, &m) in design_row[offset..].iter_mut().zip(row) {
            *d = f64::from(m);
        }
        let w = match weighting {
            Weighting::Uniform => 1.0,
            Weighting::ShapleyKernel => {
                shapley_kernel_weight(n, row.iter().filter(|&&m| m != 0).count())
            }
        };
        for a in 0..p {
            if design_row[a] == 0.0 {
                continue;
            }
            rhs[a] += w * design_row[a] * y;
            for b in 0..p {
                gram[(a, b)] += w * design_row[a] * design_row[b];
            }
        }
    }

    let mut regularized = gram.clone();
    for i in 0..p {
        regularized[(i, i)] += RIDGE;
    }
    let chol = regularized
        .cholesky()
        .ok_or_else(|| AttributionError::Numeric("normal equations are not positive definite".into()))?;
    let mut beta = chol.solve(&rhs);
    for _ in 0..REFINEMENT_STEPS {
        let residual = &rhs - &gram * &beta;
        beta += chol.solve(&residual);
    }
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(AttributionError::Numeric("solution is not finite".into()));
    }
    let intercept = if with_intercept { beta[0] } else { 0.0 };
    Ok(OlsSolution {
        intercept,
        coefficients: beta.iter().skip(offset).copied().collect(),
    })
}
