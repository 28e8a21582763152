//! Per-step binary cross-entropy on the softmax conversion probability.

use ndarray::{Array2, ArrayView2};

use super::TrainError;

/// Probabilities are clipped to `[PROB_CLIP, 1 − PROB_CLIP]` before the log.
pub const PROB_CLIP: f64 = 1e-12;

/// Softmax probability of class 1 from a pair of logits.
#[inline]
pub fn conversion_probability(z0: f64, z1: f64) -> f64 {
    1.0 / (1.0 + (z0 - z1).exp())
}

fn check(logits: ArrayView2<f64>, labels: &[u8], step_mask: &[u8]) -> Result<usize, TrainError> {
    let n = logits.nrows();
    if logits.ncols() != 2 || labels.len() != n || step_mask.len() != n {
        return Err(TrainError::Shape(format!(
            "logits {:?}, {} labels, {} mask entries",
            logits.dim(),
            labels.len(),
            step_mask.len()
        )));
    }
    let scored = step_mask.iter().filter(|&&m| m != 0).count();
    if scored == 0 {
        return Err(TrainError::NoSteps);
    }
    Ok(scored)
}

/// Mean cross-entropy over the steps where `step_mask` is 1.
pub fn loss(logits: ArrayView2<f64>, labels: &[u8], step_mask: &[u8]) -> Result<f64, TrainError> {
    loss_and_grad(logits, labels, step_mask).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the logits.
pub fn loss_and_grad(
    logits: ArrayView2<f64>,
    labels: &[u8],
    step_mask: &[u8],
) -> Result<(f64, Array2<f64>), TrainError> {
    let scored = check(logits, labels, step_mask)? as f64;
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0;
    for t in 0..logits.nrows() {
        if step_mask[t] == 0 {
            continue;
        }
        let raw = conversion_probability(logits[[t, 0]], logits[[t, 1]]);
        let y = raw.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        let target = f64::from(labels[t]);
        total -= target * y.ln() + (1.0 - target) * (1.0 - y).ln();
        if raw > PROB_CLIP && raw < 1.0 - PROB_CLIP {
            // d/dz1 of the cross-entropy through the two-class softmax.
            let d = (y - target) / scored;
            grad[[t, 1]] = d;
            grad[[t, 0]] = -d;
        }
    }
    Ok((total / scored, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_prediction_is_near_zero() {
        let l = loss(array![[-40.0, 40.0]].view(), &[1], &[1]).unwrap();
        assert!(l < 1e-11 && l >= 0.0);
    }

    #[test]
    fn coin_flip() {
        let l = loss(array![[0.0, 0.0]].view(), &[1], &[1]).unwrap();
        assert!((l - 0.693147).abs() < 1e-6);
        let l = loss(array![[0.3, 0.3], [1.0, 1.0]].view(), &[0, 1], &[1, 1]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn mask_excludes_steps() {
        let logits = array![[0.0, 5.0], [0.0, 0.0]];
        let masked = loss(logits.view(), &[0, 1], &[0, 1]).unwrap();
        assert!((masked - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(loss(logits.view(), &[0, 1], &[0, 0]), Err(TrainError::NoSteps)));
        assert!(loss(logits.view(), &[0], &[1, 1]).is_err());
    }

    #[test]
    fn gradient_matches_differences() {
        let logits = array![[0.2, -0.4], [1.3, 0.1], [-0.5, 0.9]];
        let labels = [0, 0, 1];
        let mask = [1, 0, 1];
        let (_, g) = loss_and_grad(logits.view(), &labels, &mask).unwrap();
        let h = 1e-6;
        for t in 0..3 {
            for c in 0..2 {
                let mut p = logits.clone();
                let mut m = logits.clone();
                p[[t, c]] += h;
                m[[t, c]] -= h;
                let fd = (loss(p.view(), &labels, &mask).unwrap()
                    - loss(m.view(), &labels, &mask).unwrap())
                    / (2.0 * h);
                assert!((fd - g[[t, c]]).abs() < 1e-8);
            }
        }
    }
}
