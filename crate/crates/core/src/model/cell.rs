//! A single phased LSTM step and its exact reverse pass.

use super::gate::{eval_gate, gate_partials, GateEval};
use super::norm::{layer_norm_backward, layer_norm_into, NormCache, LAYER_NORM_EPS};
use super::params::{PhasedLstmLayerParams, GATE_C, GATE_F, GATE_I, GATE_O};
use super::ModelError;

/// Everything the reverse pass needs from one forward step.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub norm: [NormCache; 4],
    /// Activated gates in storage order: i, f, candidate (tanh), o.
    pub gates: [Vec<f64>; 4],
    pub c_tilde: Vec<f64>,
    pub tanh_c_tilde: Vec<f64>,
    pub h_tilde: Vec<f64>,
    pub time_gate: Vec<GateEval>,
    pub t: f64,
    pub leak: f64,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `out += v · W` for row-major `W` (`v.len() × out.len()`). Zero entries
/// of `v` are skipped; encoded inputs are mostly one-hot zeros.
#[inline]
pub(crate) fn vec_mat_acc(v: &[f64], w: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        let row = &w[i * cols..(i + 1) * cols];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += vi * wij;
        }
    }
}

/// `out += W · g` for row-major `W` (`out.len() × g.len()`).
#[inline]
fn mat_vec_acc(w: &[f64], g: &[f64], out: &mut [f64]) {
    let cols = g.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        *o += row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `dw += v ⊗ g`.
#[inline]
fn outer_acc(v: &[f64], g: &[f64], dw: &mut [f64]) {
    let cols = g.len();
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        let row = &mut dw[i * cols..(i + 1) * cols];
        for (d, &gj) in row.iter_mut().zip(g) {
            *d += vi * gj;
        }
    }
}

fn slice(a: &ndarray::Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice_mut(a: &mut ndarray::Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// Unchecked step. `leak` replaces the layer's `alpha` so inference can run
/// with a fully closed gate.
pub(crate) fn step(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    t: f64,
    layer: &PhasedLstmLayerParams,
    leak: f64,
) -> (Vec<f64>, Vec<f64>, CellCache) {
    let hidden = layer.hidden();
    let gain = layer.ln_gain.as_slice().expect("standard layout");
    let ln_bias = layer.ln_bias.as_slice().expect("standard layout");

    let mut normed: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; hidden]);
    let norm: [NormCache; 4] = std::array::from_fn(|g| {
        let mut a = vec![0.0; hidden];
        vec_mat_acc(x, slice(&layer.w_x[g]), &mut a);
        vec_mat_acc(h_prev, slice(&layer.w_h[g]), &mut a);
        layer_norm_into(&a, gain, ln_bias, LAYER_NORM_EPS, &mut normed[g])
    });

    let mut gates: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; hidden]);
    let mut c_tilde = vec![0.0; hidden];
    let mut tanh_c_tilde = vec![0.0; hidden];
    let mut h_tilde = vec![0.0; hidden];
    let mut time_gate = Vec::with_capacity(hidden);
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    for u in 0..hidden {
        let cp = c_prev[u];
        let i = sigmoid(normed[GATE_I][u] + layer.peep[0][u] * cp + layer.bias[GATE_I][u]);
        let f = sigmoid(normed[GATE_F][u] + layer.peep[1][u] * cp + layer.bias[GATE_F][u]);
        let g = (normed[GATE_C][u] + layer.bias[GATE_C][u]).tanh();
        let o = sigmoid(normed[GATE_O][u] + layer.peep[2][u] * cp + layer.bias[GATE_O][u]);
        let ct = f * cp + i * g;
        let tc = ct.tanh();
        let ht = o * tc;
        let ge = eval_gate(t, layer.tau[u], layer.shift[u], layer.r_on[u], leak);
        let k = ge.k;
        c[u] = k * ct + (1.0 - k) * cp;
        h[u] = k * ht + (1.0 - k) * h_prev[u];
        gates[GATE_I][u] = i;
        gates[GATE_F][u] = f;
        gates[GATE_C][u] = g;
        gates[GATE_O][u] = o;
        c_tilde[u] = ct;
        tanh_c_tilde[u] = tc;
        h_tilde[u] = ht;
        time_gate.push(ge);
    }
    let cache = CellCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        norm,
        gates,
        c_tilde,
        tanh_c_tilde,
        h_tilde,
        time_gate,
        t,
        leak,
    };
    (h, c, cache)
}

/// One step of the cell: gates with peepholes on the previous cell state,
/// a candidate state, then the time gate blending candidate and previous
/// states. Returns `(h_t, c_t, cache)`.
pub fn cell_forward(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    t: f64,
    layer: &PhasedLstmLayerParams,
) -> Result<(Vec<f64>, Vec<f64>, CellCache), ModelError> {
    let hidden = layer.hidden();
    for (what, got, expected) in [
        ("cell input", x.len(), layer.input_dim()),
        ("previous hidden state", h_prev.len(), hidden),
        ("previous cell state", c_prev.len(), hidden),
    ] {
        if got != expected {
            return Err(ModelError::Dimension { what, expected, got });
        }
    }
    if !x.iter().chain(h_prev).chain(c_prev).all(|v| v.is_finite()) || !t.is_finite() {
        return Err(ModelError::NonFinite("cell input"));
    }
    layer.validate()?;
    Ok(step(x, h_prev, c_prev, t, layer, layer.alpha))
}

/// Gradients flowing out of one step.
pub struct StepGrads {
    pub dx: Vec<f64>,
    pub dh_prev: Vec<f64>,
    pub dc_prev: Vec<f64>,
}

/// Reverse pass of [`step`]. `dh` and `dc` are the total gradients reaching
/// `h_t` and `c_t`; parameter gradients accumulate into `grad`. `dx` is
/// only formed when `want_dx` is set.
pub(crate) fn step_backward(
    cache: &CellCache,
    layer: &PhasedLstmLayerParams,
    dh: &[f64],
    dc: &[f64],
    grad: &mut PhasedLstmLayerParams,
    want_dx: bool,
) -> StepGrads {
    let hidden = layer.hidden();
    let mut dh_prev = vec![0.0; hidden];
    let mut dc_prev = vec![0.0; hidden];
    let mut dz: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; hidden]);

    for u in 0..hidden {
        let ge = &cache.time_gate[u];
        let k = ge.k;
        let cp = cache.c_prev[u];
        let i = cache.gates[GATE_I][u];
        let f = cache.gates[GATE_F][u];
        let g = cache.gates[GATE_C][u];
        let o = cache.gates[GATE_O][u];
        let tc = cache.tanh_c_tilde[u];

        let dk = dh[u] * (cache.h_tilde[u] - cache.h_prev[u]) + dc[u] * (cache.c_tilde[u] - cp);
        let (dk_dtau, dk_dshift, dk_dr) = gate_partials(
            ge,
            cache.t,
            layer.tau[u],
            layer.shift[u],
            layer.r_on[u],
            cache.leak,
        );
        grad.tau[u] += dk * dk_dtau;
        grad.shift[u] += dk * dk_dshift;
        grad.r_on[u] += dk * dk_dr;

        let dh_tilde = dh[u] * k;
        dh_prev[u] += dh[u] * (1.0 - k);
        let dc_tilde = dc[u] * k + dh_tilde * o * (1.0 - tc * tc);
        dc_prev[u] += dc[u] * (1.0 - k) + dc_tilde * f;

        let d_o = dh_tilde * tc;
        let d_f = dc_tilde * cp;
        let d_i = dc_tilde * g;
        let d_g = dc_tilde * i;

        let dz_i = d_i * i * (1.0 - i);
        let dz_f = d_f * f * (1.0 - f);
        let dz_c = d_g * (1.0 - g * g);
        let dz_o = d_o * o * (1.0 - o);

        grad.peep[0][u] += dz_i * cp;
        grad.peep[1][u] += dz_f * cp;
        grad.peep[2][u] += dz_o * cp;
        dc_prev[u] += dz_i * layer.peep[0][u] + dz_f * layer.peep[1][u] + dz_o * layer.peep[2][u];

        dz[GATE_I][u] = dz_i;
        dz[GATE_F][u] = dz_f;
        dz[GATE_C][u] = dz_c;
        dz[GATE_O][u] = dz_o;
    }

    let gain = layer.ln_gain.as_slice().expect("standard layout");
    let mut dx = if want_dx { vec![0.0; cache.x.len()] } else { Vec::new() };
    for (gi, dz_g) in dz.iter().enumerate() {
        for (b, d) in grad.bias[gi].iter_mut().zip(dz_g) {
            *b += d;
        }
        let mut da = vec![0.0; hidden];
        layer_norm_backward(
            dz_g,
            &cache.norm[gi],
            gain,
            grad.ln_gain.as_slice_mut().expect("standard layout"),
            grad.ln_bias.as_slice_mut().expect("standard layout"),
            &mut da,
        );
        outer_acc(&cache.x, &da, slice_mut(&mut grad.w_x[gi]));
        outer_acc(&cache.h_prev, &da, slice_mut(&mut grad.w_h[gi]));
        if want_dx {
            mat_vec_acc(slice(&layer.w_x[gi]), &da, &mut dx);
        }
        mat_vec_acc(slice(&layer.w_h[gi]), &da, &mut dh_prev);
    }
    StepGrads {
        dx,
        dh_prev,
        dc_prev,
    }
}
