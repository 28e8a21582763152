use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::gate::check_gate_params;
use super::ModelError;

/// Gate blocks, in storage order.
pub const GATES: [char; 4] = ['i', 'f', 'c', 'o'];
pub const GATE_I: usize = 0;
pub const GATE_F: usize = 1;
pub const GATE_C: usize = 2;
pub const GATE_O: usize = 3;

/// Output classes: no conversion / conversion.
pub const N_CLASSES: usize = 2;

pub const MIN_TAU: f64 = 1e-2;
pub const MIN_R_ON: f64 = 1e-3;
pub const MAX_R_ON: f64 = 1.0 - 1e-3;

/// One phased LSTM layer.
///
/// Input weights are `d_in × H` and recurrent weights `H × H`, applied as
/// row vector times matrix. Peepholes exist for the input, forget and
/// output gates and read the previous cell state.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasedLstmLayerParams {
    pub w_x: [Array2<f64>; 4],
    pub w_h: [Array2<f64>; 4],
    pub bias: [Array1<f64>; 4],
    /// Peepholes for gates i, f, o.
    pub peep: [Array1<f64>; 3],
    pub tau: Array1<f64>,
    pub shift: Array1<f64>,
    pub r_on: Array1<f64>,
    /// Leak rate of the closed phase; not trained.
    pub alpha: f64,
    pub ln_gain: Array1<f64>,
    pub ln_bias: Array1<f64>,
}

impl PhasedLstmLayerParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        let m = |r, c| Array2::zeros((r, c));
        let v = || Array1::zeros(hidden);
        Self {
            w_x: [m(input_dim, hidden), m(input_dim, hidden), m(input_dim, hidden), m(input_dim, hidden)],
            w_h: [m(hidden, hidden), m(hidden, hidden), m(hidden, hidden), m(hidden, hidden)],
            bias: [v(), v(), v(), v()],
            peep: [v(), v(), v()],
            tau: v(),
            shift: v(),
            r_on: v(),
            alpha: 0.0,
            ln_gain: v(),
            ln_bias: v(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_x[0].nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w_x[0].ncols()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (d, h) = (self.input_dim(), self.hidden());
        for w in &self.w_x {
            expect_shape("input weights", w.dim(), (d, h))?;
        }
        for w in &self.w_h {
            expect_shape("recurrent weights", w.dim(), (h, h))?;
        }
        for v in self
            .bias
            .iter()
            .chain(&self.peep)
            .chain([&self.tau, &self.shift, &self.r_on, &self.ln_gain, &self.ln_bias])
        {
            if v.len() != h {
                return Err(ModelError::Dimension {
                    what: "layer vector",
                    expected: h,
                    got: v.len(),
                });
            }
        }
        for u in 0..h {
            check_gate_params(self.tau[u], self.shift[u], self.r_on[u], self.alpha)?;
        }
        Ok(())
    }
}

fn expect_shape(what: &'static str, got: (usize, usize), expected: (usize, usize)) -> Result<(), ModelError> {
    if got.0 != expected.0 {
        return Err(ModelError::Dimension { what, expected: expected.0, got: got.0 });
    }
    if got.1 != expected.1 {
        return Err(ModelError::Dimension { what, expected: expected.1, got: got.1 });
    }
    Ok(())
}

/// Architecture description stored alongside the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub input_dim: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
    pub dropout_p: f64,
    pub max_seq_len: usize,
    pub n_classes: usize,
}

/// How a fresh model is initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub input_dim: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
    pub dropout_p: f64,
    pub max_seq_len: usize,
    /// Upper end of the log-uniform period draw, in hours.
    pub time_span_hours: f64,
    pub r_on: f64,
    pub alpha: f64,
}

impl InitConfig {
    pub fn new(input_dim: usize, hidden_size: usize) -> Self {
        Self {
            input_dim,
            hidden_size,
            n_layers: 2,
            dropout_p: 0.0,
            max_seq_len: crate::journey::DEFAULT_MAX_SEQ_LEN,
            time_span_hours: 240.0,
            r_on: 0.05,
            alpha: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<PhasedLstmLayerParams>,
    /// `H × 2` projection from the top hidden state to the class logits.
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
    pub hidden_size: usize,
    pub dropout_p: f64,
    pub max_seq_len: usize,
}

/// Borrowed view of one named tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
    pub kind: TensorKind,
}

pub struct TensorMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
    pub kind: TensorKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    /// Gate period, shift or open ratio.
    Timing,
    /// Stored but never updated.
    Fixed,
}

fn flat1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn flat2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

impl ModelParams {
    /// Fresh parameters. Weights are uniform in `±1/sqrt(H)`, the forget
    /// bias starts at 1, periods are log-uniform in `[1, time_span]` hours
    /// and shifts uniform in `[0, tau]`.
    pub fn init<R: Rng + ?Sized>(cfg: &InitConfig, rng: &mut R) -> Result<Self, ModelError> {
        if cfg.hidden_size == 0 || cfg.n_layers == 0 || cfg.input_dim == 0 {
            return Err(ModelError::Parameter(
                "input_dim, hidden_size and n_layers must be positive".into(),
            ));
        }
        super::norm::check_dropout(cfg.dropout_p)?;
        let h = cfg.hidden_size;
        let bound = 1.0 / (h as f64).sqrt();
        let weight = Uniform::new_inclusive(-bound, bound).expect("valid range");
        let span = cfg.time_span_hours.max(1.0 + 1e-9);
        let log_tau = Uniform::new_inclusive(0.0, span.ln()).expect("valid range");

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let d = if l == 0 { cfg.input_dim } else { h };
            let mut layer = PhasedLstmLayerParams::zeros(d, h);
            for w in layer.w_x.iter_mut().chain(layer.w_h.iter_mut()) {
                w.mapv_inplace(|_| weight.sample(rng));
            }
            for p in layer.peep.iter_mut() {
                p.mapv_inplace(|_| weight.sample(rng));
            }
            layer.bias[GATE_F].fill(1.0);
            for u in 0..h {
                let tau = log_tau.sample(rng).exp();
                layer.tau[u] = tau;
                layer.shift[u] = rng.random_range(0.0..tau);
            }
            layer.r_on.fill(cfg.r_on);
            layer.alpha = cfg.alpha;
            layer.ln_gain.fill(1.0);
            layers.push(layer);
        }
        let mut w_out = Array2::zeros((h, N_CLASSES));
        w_out.mapv_inplace(|_: f64| weight.sample(rng));
        let params = Self {
            layers,
            w_out,
            b_out: Array1::zeros(N_CLASSES),
            hidden_size: h,
            dropout_p: cfg.dropout_p,
            max_seq_len: cfg.max_seq_len,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input_dim())
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            input_dim: self.input_dim(),
            hidden_size: self.hidden_size,
            n_layers: self.layers.len(),
            dropout_p: self.dropout_p,
            max_seq_len: self.max_seq_len,
            n_classes: N_CLASSES,
        }
    }

    /// All-zero parameters with the same architecture; used for gradients.
    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| PhasedLstmLayerParams::zeros(l.input_dim(), l.hidden()))
            .collect();
        Self {
            layers,
            w_out: Array2::zeros(self.w_out.dim()),
            b_out: Array1::zeros(self.b_out.len()),
            hidden_size: self.hidden_size,
            dropout_p: self.dropout_p,
            max_seq_len: self.max_seq_len,
        }
    }

    /// Builds zero parameters for `hp` (checkpoint loading).
    pub fn zeros_for(hp: &Hyperparams) -> Result<Self, ModelError> {
        if hp.n_classes != N_CLASSES {
            return Err(ModelError::Checkpoint(format!(
                "expected {N_CLASSES} classes, got {}",
                hp.n_classes
            )));
        }
        if hp.hidden_size == 0 || hp.n_layers == 0 || hp.input_dim == 0 {
            return Err(ModelError::Checkpoint("empty architecture".into()));
        }
        let layers = (0..hp.n_layers)
            .map(|l| {
                let d = if l == 0 { hp.input_dim } else { hp.hidden_size };
                PhasedLstmLayerParams::zeros(d, hp.hidden_size)
            })
            .collect();
        Ok(Self {
            layers,
            w_out: Array2::zeros((hp.hidden_size, N_CLASSES)),
            b_out: Array1::zeros(N_CLASSES),
            hidden_size: hp.hidden_size,
            dropout_p: hp.dropout_p,
            max_seq_len: hp.max_seq_len,
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers.is_empty() {
            return Err(ModelError::Parameter("model has no layers".into()));
        }
        super::norm::check_dropout(self.dropout_p)?;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.hidden() != self.hidden_size {
                return Err(ModelError::Dimension {
                    what: "layer width",
                    expected: self.hidden_size,
                    got: layer.hidden(),
                });
            }
            if l > 0 && layer.input_dim() != self.hidden_size {
                return Err(ModelError::Dimension {
                    what: "stacked layer input",
                    expected: self.hidden_size,
                    got: layer.input_dim(),
                });
            }
            layer.validate()?;
        }
        expect_shape("output projection", self.w_out.dim(), (self.hidden_size, N_CLASSES))?;
        if self.b_out.len() != N_CLASSES {
            return Err(ModelError::Dimension {
                what: "output bias",
                expected: N_CLASSES,
                got: self.b_out.len(),
            });
        }
        if self.tensors().iter().any(|t| t.data.iter().any(|v| !v.is_finite())) {
            return Err(ModelError::NonFinite("parameters"));
        }
        Ok(())
    }

    /// Every tensor, named `layer{l}.{field}` or `out.{field}`, in a fixed
    /// order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (g, w) in GATES.iter().zip(&layer.w_x) {
                out.push(tref(format!("layer{l}.w_x{g}"), w.shape(), flat2(w), TensorKind::Weight));
            }
            for (g, w) in GATES.iter().zip(&layer.w_h) {
                out.push(tref(format!("layer{l}.w_h{g}"), w.shape(), flat2(w), TensorKind::Weight));
            }
            for (g, b) in GATES.iter().zip(&layer.bias) {
                out.push(tref(format!("layer{l}.b_{g}"), b.shape(), flat1(b), TensorKind::Weight));
            }
            for (g, p) in ['i', 'f', 'o'].iter().zip(&layer.peep) {
                out.push(tref(format!("layer{l}.w_c{g}"), p.shape(), flat1(p), TensorKind::Weight));
            }
            out.push(tref(format!("layer{l}.tau"), layer.tau.shape(), flat1(&layer.tau), TensorKind::Timing));
            out.push(tref(format!("layer{l}.shift"), layer.shift.shape(), flat1(&layer.shift), TensorKind::Timing));
            out.push(tref(format!("layer{l}.r_on"), layer.r_on.shape(), flat1(&layer.r_on), TensorKind::Timing));
            out.push(tref(
                format!("layer{l}.alpha"),
                &[1],
                std::slice::from_ref(&layer.alpha),
                TensorKind::Fixed,
            ));
            out.push(tref(format!("layer{l}.ln_gain"), layer.ln_gain.shape(), flat1(&layer.ln_gain), TensorKind::Weight));
            out.push(tref(format!("layer{l}.ln_bias"), layer.ln_bias.shape(), flat1(&layer.ln_bias), TensorKind::Weight));
        }
        out.push(tref("out.w".into(), self.w_out.shape(), flat2(&self.w_out), TensorKind::Weight));
        out.push(tref("out.b".into(), self.b_out.shape(), flat1(&self.b_out), TensorKind::Weight));
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        fn m1(a: &mut Array1<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        fn m2(a: &mut Array2<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (g, w) in GATES.iter().zip(layer.w_x.iter_mut()) {
                out.push(tmut(format!("layer{l}.w_x{g}"), m2(w), TensorKind::Weight));
            }
            for (g, w) in GATES.iter().zip(layer.w_h.iter_mut()) {
                out.push(tmut(format!("layer{l}.w_h{g}"), m2(w), TensorKind::Weight));
            }
            for (g, b) in GATES.iter().zip(layer.bias.iter_mut()) {
                out.push(tmut(format!("layer{l}.b_{g}"), m1(b), TensorKind::Weight));
            }
            for (g, p) in ['i', 'f', 'o'].iter().zip(layer.peep.iter_mut()) {
                out.push(tmut(format!("layer{l}.w_c{g}"), m1(p), TensorKind::Weight));
            }
            out.push(tmut(format!("layer{l}.tau"), m1(&mut layer.tau), TensorKind::Timing));
            out.push(tmut(format!("layer{l}.shift"), m1(&mut layer.shift), TensorKind::Timing));
            out.push(tmut(format!("layer{l}.r_on"), m1(&mut layer.r_on), TensorKind::Timing));
            out.push(tmut(
                format!("layer{l}.alpha"),
                std::slice::from_mut(&mut layer.alpha),
                TensorKind::Fixed,
            ));
            out.push(tmut(format!("layer{l}.ln_gain"), m1(&mut layer.ln_gain), TensorKind::Weight));
            out.push(tmut(format!("layer{l}.ln_bias"), m1(&mut layer.ln_bias), TensorKind::Weight));
        }
        out.push(tmut("out.w".into(), m2(&mut self.w_out), TensorKind::Weight));
        out.push(tmut("out.b".into(), m1(&mut self.b_out), TensorKind::Weight));
        out
    }

    /// Adds `scale * other` into every trainable tensor.
    pub fn add_scaled(&mut self, scale: f64, other: &ModelParams) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            if dst.kind == TensorKind::Fixed {
                continue;
            }
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    /// Euclidean norm over all trainable tensors.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .filter(|t| t.kind != TensorKind::Fixed)
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            if t.kind != TensorKind::Fixed {
                t.data.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    /// Keeps gate timing inside its valid region after an update.
    pub fn clamp_timing(&mut self) {
        for layer in &mut self.layers {
            layer.tau.mapv_inplace(|t| t.max(MIN_TAU));
            layer.r_on.mapv_inplace(|r| r.clamp(MIN_R_ON, MAX_R_ON));
        }
    }
}

fn tref<'a>(name: String, shape: &[usize], data: &'a [f64], kind: TensorKind) -> TensorRef<'a> {
    TensorRef {
        name,
        shape: shape.to_vec(),
        data,
        kind,
    }
}

fn tmut(name: String, data: &mut [f64], kind: TensorKind) -> TensorMut<'_> {
    TensorMut { name, data, kind }
}
