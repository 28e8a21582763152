//! Layer normalization and inverted dropout.

use rand::Rng;

use super::ModelError;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalized activations and the statistic needed by the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: f64,
}

/// `gain ⊙ (a − mean) / sqrt(var + eps) + bias`, writing into `out`.
pub fn layer_norm_into(a: &[f64], gain: &[f64], bias: &[f64], eps: f64, out: &mut [f64]) -> NormCache {
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let xhat: Vec<f64> = a.iter().map(|v| (v - mean) * inv_std).collect();
    for ((o, (&x, &g)), &b) in out.iter_mut().zip(xhat.iter().zip(gain)).zip(bias) {
        *o = g * x + b;
    }
    NormCache { xhat, inv_std }
}

pub fn layer_norm(a: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>, ModelError> {
    if a.is_empty() {
        return Err(ModelError::Dimension {
            what: "layer norm input",
            expected: 1,
            got: 0,
        });
    }
    for (what, v) in [("layer norm gain", gain), ("layer norm bias", bias)] {
        if v.len() != a.len() {
            return Err(ModelError::Dimension {
                what,
                expected: a.len(),
                got: v.len(),
            });
        }
    }
    let mut out = vec![0.0; a.len()];
    layer_norm_into(a, gain, bias, eps, &mut out);
    Ok(out)
}

/// Backward through layer norm. Accumulates gain/bias gradients and adds
/// the gradient with respect to the raw input `a` into `da`.
pub fn layer_norm_backward(
    dout: &[f64],
    cache: &NormCache,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    da: &mut [f64],
) {
    let n = dout.len() as f64;
    let mut mean_dx = 0.0;
    let mut mean_dx_x = 0.0;
    for i in 0..dout.len() {
        dgain[i] += dout[i] * cache.xhat[i];
        dbias[i] += dout[i];
        let dx = dout[i] * gain[i];
        mean_dx += dx;
        mean_dx_x += dx * cache.xhat[i];
    }
    mean_dx /= n;
    mean_dx_x /= n;
    for i in 0..dout.len() {
        let dx = dout[i] * gain[i];
        da[i] += cache.inv_std * (dx - mean_dx - cache.xhat[i] * mean_dx_x);
    }
}

pub fn check_dropout(p: f64) -> Result<(), ModelError> {
    if !(0.0..1.0).contains(&p) {
        return Err(ModelError::Parameter(format!(
            "dropout probability must lie in [0, 1), got {p}"
        )));
    }
    Ok(())
}

/// Per-unit multipliers for inverted dropout: 0 with probability `p`,
/// `1 / (1 − p)` otherwise.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<f64> {
    if p == 0.0 {
        return vec![1.0; len];
    }
    let scale = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
        .collect()
}

/// Inverted dropout; the identity outside training.
pub fn dropout<R: Rng + ?Sized>(
    v: &[f64],
    p: f64,
    rng: &mut R,
    training: bool,
) -> Result<Vec<f64>, ModelError> {
    check_dropout(p)?;
    if !training {
        return Ok(v.to_vec());
    }
    let mask = dropout_mask(v.len(), p, rng);
    Ok(v.iter().zip(&mask).map(|(x, m)| x * m).collect())
}
