//! Backpropagation against central finite differences on small random
//! models, covering every trainable tensor including gate timing.

use mta_core::journey::EncodedJourney;
use mta_core::model::gate::phase_of;
use mta_core::model::{InitConfig, ModelParams, TensorKind};
use mta_core::trainer::journey_gradient;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
/// Minimum phase distance from any gate break point.
const BREAK_MARGIN: f64 = 1e-3;
/// Magnitude below which central differences at `STEP` are dominated by
/// rounding (about machine epsilon times the loss over the step).
const NOISE_FLOOR: f64 = 1e-6;

fn journey(rng: &mut ChaCha8Rng, d: usize, n: usize) -> EncodedJourney {
    let mut features = Array2::zeros((n, d));
    let mut times = Vec::with_capacity(n);
    let mut t = 0.0;
    for i in 0..n {
        if i > 0 {
            t += rng.random_range(0.2..3.0);
        }
        features[[i, rng.random_range(0..d - 1)]] = 1.0;
        features[[i, d - 1]] = t;
        times.push(t);
    }
    let mut labels = vec![0; n];
    labels[n - 1] = 1;
    EncodedJourney {
        features,
        times,
        labels,
    }
}

fn near_break(params: &ModelParams, times: &[f64]) -> bool {
    params.layers.iter().any(|layer| {
        (0..layer.hidden()).any(|u| {
            let r = layer.r_on[u];
            times.iter().any(|&t| {
                let phi = phase_of(t, layer.tau[u], layer.shift[u]);
                [0.0, r / 2.0, r, 1.0]
                    .iter()
                    .any(|b| (phi - b).abs() < BREAK_MARGIN)
            })
        })
    })
}

/// Random model with gates open often enough that every parameter matters,
/// redrawn until no gate sits near a break point at any step time.
fn model(seed: u64, dropout_p: f64) -> (ModelParams, EncodedJourney) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 6;
    loop {
        let enc = journey(&mut rng, d, 3);
        let cfg = InitConfig {
            dropout_p,
            time_span_hours: 6.0,
            r_on: 0.5,
            ..InitConfig::new(d, 8)
        };
        let mut params = ModelParams::init(&cfg, &mut rng).unwrap();
        for layer in &mut params.layers {
            layer.r_on.mapv_inplace(|_| rng.random_range(0.3..0.7));
            for b in layer.bias.iter_mut() {
                b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            }
            layer.ln_gain.mapv_inplace(|_| rng.random_range(0.5..1.5));
            layer.ln_bias.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
        params.b_out.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        if !near_break(&params, &enc.times) {
            return (params, enc);
        }
    }
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(NOISE_FLOOR)
}

/// Worst relative error per tensor.
fn check(seed: u64, dropout_p: f64) -> Vec<(String, f64)> {
    let (params, enc) = model(seed, dropout_p);
    let training = dropout_p > 0.0;
    let stream = seed ^ 0xABCD;
    let (_, grad) = journey_gradient(&params, &enc, training, stream).unwrap();
    let analytic: Vec<(String, TensorKind, Vec<f64>)> = grad
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.kind, t.data.to_vec()))
        .collect();

    let mut report = Vec::new();
    for (ti, (name, kind, g)) in analytic.iter().enumerate() {
        if *kind == TensorKind::Fixed {
            continue;
        }
        let mut worst: f64 = 0.0;
        for (k, &a) in g.iter().enumerate() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.tensors_mut()[ti].data[k] += delta;
                journey_gradient(&p, &enc, training, stream).unwrap().0
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            worst = worst.max(relative_error(a, numeric));
        }
        report.push((name.clone(), worst));
    }
    report
}

fn assert_within(report: &[(String, f64)]) {
    let failures: Vec<_> = report.iter().filter(|(_, e)| *e > TOLERANCE).collect();
    assert!(failures.is_empty(), "gradient mismatch: {failures:?}");
}

#[test]
fn every_tensor_matches_differences() {
    for seed in 0..3 {
        let report = check(seed, 0.0);
        assert!(report.iter().any(|(n, _)| n == "layer1.tau"));
        assert!(report.iter().any(|(n, _)| n == "layer0.w_cf"));
        assert_within(&report);
    }
}

#[test]
fn gradients_hold_under_fixed_dropout_masks() {
    assert_within(&check(11, 0.3));
}
