//! Full-sequence forward pass over stacked layers and backpropagation
//! through time.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cell::{step, step_backward, vec_mat_acc, CellCache};
use super::norm::dropout_mask;
use super::params::{ModelParams, N_CLASSES};
use super::ModelError;
use crate::journey::EncodedJourney;

/// Cached state of one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `steps[layer][t]`.
    pub steps: Vec<Vec<CellCache>>,
    /// `dropout_masks[layer][t]` multiplies the hidden state of `layer`
    /// before it feeds `layer + 1`.
    pub dropout_masks: Vec<Vec<Vec<f64>>>,
    /// Hidden state of the top layer at each step.
    pub top_hidden: Vec<Vec<f64>>,
    pub logits: Array2<f64>,
    pub training: bool,
    pub hidden_size: usize,
    pub input_dim: usize,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.top_hidden.len()
    }
}

fn check_input(enc: &EncodedJourney, params: &ModelParams) -> Result<(), ModelError> {
    let n = enc.len();
    if n == 0 {
        return Err(ModelError::Dimension {
            what: "sequence length",
            expected: 1,
            got: 0,
        });
    }
    if enc.features.nrows() != n {
        return Err(ModelError::Dimension {
            what: "feature rows",
            expected: n,
            got: enc.features.nrows(),
        });
    }
    if enc.features.ncols() != params.input_dim() {
        return Err(ModelError::Dimension {
            what: "feature width",
            expected: params.input_dim(),
            got: enc.features.ncols(),
        });
    }
    if enc.features.iter().chain(&enc.times).any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("encoded journey"));
    }
    Ok(())
}

/// Runs the stacked phased LSTM over a journey and projects every step to
/// two class logits.
///
/// Training mode applies inverted dropout between layers and uses each
/// layer's leak rate; inference is deterministic and closes the gate fully
/// outside its open window.
pub fn forward_sequence<R: Rng + ?Sized>(
    enc: &EncodedJourney,
    params: &ModelParams,
    training: bool,
    rng: &mut R,
) -> Result<(Array2<f64>, ForwardTrace), ModelError> {
    check_input(enc, params)?;
    let n = enc.len();
    let hidden = params.hidden_size;
    let n_layers = params.layers.len();

    let mut inputs: Vec<Vec<f64>> = enc.features.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut steps = Vec::with_capacity(n_layers);
    let mut dropout_masks = Vec::with_capacity(n_layers.saturating_sub(1));
    for (l, layer) in params.layers.iter().enumerate() {
        let leak = if training { layer.alpha } else { 0.0 };
        let mut h = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        let mut caches = Vec::with_capacity(n);
        let mut outputs = Vec::with_capacity(n);
        for (x, &t) in inputs.iter().zip(&enc.times) {
            let (h_next, c_next, cache) = step(x, &h, &c, t, layer, leak);
            h = h_next;
            c = c_next;
            caches.push(cache);
            outputs.push(h.clone());
        }
        steps.push(caches);
        if l + 1 < n_layers {
            if training && params.dropout_p > 0.0 {
                let masks: Vec<Vec<f64>> = (0..n)
                    .map(|_| dropout_mask(hidden, params.dropout_p, rng))
                    .collect();
                for (o, m) in outputs.iter_mut().zip(&masks) {
                    o.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
                }
                dropout_masks.push(masks);
            } else {
                dropout_masks.push(vec![vec![1.0; hidden]; n]);
            }
        }
        inputs = outputs;
    }

    let w_out = params.w_out.as_slice().expect("standard layout");
    let mut logits = Array2::zeros((n, N_CLASSES));
    for (t, h) in inputs.iter().enumerate() {
        let mut z = params.b_out.to_vec();
        vec_mat_acc(h, w_out, &mut z);
        logits[[t, 0]] = z[0];
        logits[[t, 1]] = z[1];
    }
    let trace = ForwardTrace {
        steps,
        dropout_masks,
        top_hidden: inputs,
        logits: logits.clone(),
        training,
        hidden_size: hidden,
        input_dim: params.input_dim(),
    };
    Ok((logits, trace))
}

/// Inference logits without keeping a trace.
pub fn infer_logits(enc: &EncodedJourney, params: &ModelParams) -> Result<Array2<f64>, ModelError> {
    // Inference draws no randomness; the generator is never touched.
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    forward_sequence(enc, params, false, &mut unused).map(|(logits, _)| logits)
}

/// Exact gradients of a scalar loss with respect to every parameter, given
/// the loss gradient with respect to the logits of `trace`.
pub fn backward_sequence(
    params: &ModelParams,
    trace: &ForwardTrace,
    grad_logits: &Array2<f64>,
) -> Result<ModelParams, ModelError> {
    let n = trace.seq_len();
    if trace.hidden_size != params.hidden_size
        || trace.input_dim != params.input_dim()
        || trace.steps.len() != params.layers.len()
        || trace.steps.iter().any(|s| s.len() != n)
    {
        return Err(ModelError::StaleTrace(
            "trace was produced by a model with a different architecture".into(),
        ));
    }
    if grad_logits.dim() != (n, N_CLASSES) {
        return Err(ModelError::StaleTrace(format!(
            "logit gradient has shape {:?}, trace expects ({n}, {N_CLASSES})",
            grad_logits.dim()
        )));
    }

    let hidden = params.hidden_size;
    let mut grad = params.zeros_like();

    // Output projection.
    let w_out = params.w_out.as_slice().expect("standard layout");
    let mut dh_ext: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (t, h) in trace.top_hidden.iter().enumerate() {
        let g = [grad_logits[[t, 0]], grad_logits[[t, 1]]];
        grad.b_out[0] += g[0];
        grad.b_out[1] += g[1];
        let mut dh = vec![0.0; hidden];
        for u in 0..hidden {
            grad.w_out[[u, 0]] += h[u] * g[0];
            grad.w_out[[u, 1]] += h[u] * g[1];
            dh[u] = w_out[u * N_CLASSES] * g[0] + w_out[u * N_CLASSES + 1] * g[1];
        }
        dh_ext.push(dh);
    }

    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let want_dx = l > 0;
        let mut dh_next = vec![0.0; hidden];
        let mut dc_next = vec![0.0; hidden];
        let mut dx_seq = vec![Vec::new(); n];
        for t in (0..n).rev() {
            let dh: Vec<f64> = dh_ext[t].iter().zip(&dh_next).map(|(a, b)| a + b).collect();
            let out = step_backward(&trace.steps[l][t], layer, &dh, &dc_next, &mut grad.layers[l], want_dx);
            dh_next = out.dh_prev;
            dc_next = out.dc_prev;
            dx_seq[t] = out.dx;
        }
        if want_dx {
            let masks = &trace.dropout_masks[l - 1];
            dh_ext = dx_seq
                .into_iter()
                .zip(masks)
                .map(|(dx, m)| dx.iter().zip(m).map(|(d, s)| d * s).collect())
                .collect();
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::InitConfig;
    use ndarray::array;

    fn model(d: usize, h: usize) -> ModelParams {
        ModelParams::init(&InitConfig::new(d, h), &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
    }

    fn journey(rows: Vec<Vec<f64>>, times: Vec<f64>) -> EncodedJourney {
        let n = rows.len();
        let d = rows[0].len();
        EncodedJourney {
            features: Array2::from_shape_vec((n, d), rows.concat()).unwrap(),
            labels: vec![0; n],
            times,
        }
    }

    #[test]
    fn single_step_shape() {
        let p = model(3, 6);
        let enc = journey(vec![vec![1.0, 0.0, 0.0]], vec![0.0]);
        let logits = infer_logits(&enc, &p).unwrap();
        assert_eq!(logits.dim(), (1, 2));
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_rows_are_fine_and_inference_is_pure() {
        let p = model(3, 6);
        let enc = journey(
            vec![vec![1.0, 0.0, 0.0], vec![0.0; 3], vec![0.0, 1.0, 5.0]],
            vec![0.0, 2.0, 5.0],
        );
        let a = infer_logits(&enc, &p).unwrap();
        let b = infer_logits(&enc, &p).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dimension_mismatch() {
        let p = model(3, 6);
        let enc = journey(vec![vec![1.0, 0.0]], vec![0.0]);
        assert!(matches!(infer_logits(&enc, &p), Err(ModelError::Dimension { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = model(3, 5);
        let enc = journey(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0]], vec![0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (logits, trace) = forward_sequence(&enc, &p, true, &mut rng).unwrap();
        let grad = backward_sequence(&p, &trace, &Array2::zeros(logits.dim())).unwrap();
        assert_eq!(grad.global_norm(), 0.0);
    }

    #[test]
    fn stale_trace_is_rejected() {
        let p = model(3, 5);
        let other = model(3, 4);
        let enc = journey(vec![vec![1.0, 0.0, 0.0]], vec![0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, trace) = forward_sequence(&enc, &p, false, &mut rng).unwrap();
        assert!(matches!(
            backward_sequence(&other, &trace, &array![[0.0, 0.0]]),
            Err(ModelError::StaleTrace(_))
        ));
        assert!(backward_sequence(&p, &trace, &array![[0.0, 0.0], [1.0, 1.0]]).is_err());
    }
}
