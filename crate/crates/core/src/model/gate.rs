//! The periodic time gate of a phased LSTM unit.
//!
//! Each unit oscillates with period `tau` and phase shift `s`. Within a
//! cycle the gate rises linearly from 0 to 1 over the first half of the open
//! window, falls back to 0 over the second half, and leaks at rate `alpha`
//! for the rest of the cycle.

use super::ModelError;

/// Which piece of the gate a phase falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatePhase {
    Rising,
    Falling,
    Closed,
}

/// Gate value together with the pieces needed to differentiate it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateEval {
    pub k: f64,
    pub phi: f64,
    pub phase: GatePhase,
}

/// Cycle position in `[0, 1)`.
#[inline]
pub fn phase_of(t: f64, tau: f64, shift: f64) -> f64 {
    let phi = (t - shift).rem_euclid(tau) / tau;
    // rem_euclid can round up to exactly tau for tiny negative inputs.
    if phi >= 1.0 {
        0.0
    } else {
        phi
    }
}

#[inline]
pub fn eval_gate(t: f64, tau: f64, shift: f64, r_on: f64, alpha: f64) -> GateEval {
    let phi = phase_of(t, tau, shift);
    let (k, phase) = if phi < 0.5 * r_on {
        (2.0 * phi / r_on, GatePhase::Rising)
    } else if phi < r_on {
        (2.0 - 2.0 * phi / r_on, GatePhase::Falling)
    } else {
        (alpha * phi, GatePhase::Closed)
    };
    GateEval { k, phi, phase }
}

pub fn check_gate_params(tau: f64, shift: f64, r_on: f64, alpha: f64) -> Result<(), ModelError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(ModelError::Parameter(format!("tau must be positive, got {tau}")));
    }
    if !(r_on > 0.0 && r_on < 1.0) {
        return Err(ModelError::Parameter(format!(
            "r_on must lie in (0, 1), got {r_on}"
        )));
    }
    if !shift.is_finite() {
        return Err(ModelError::Parameter(format!("shift must be finite, got {shift}")));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(ModelError::Parameter(format!(
            "alpha must be non-negative, got {alpha}"
        )));
    }
    Ok(())
}

/// Checked scalar gate.
pub fn time_gate(t: f64, tau: f64, shift: f64, r_on: f64, alpha: f64) -> Result<f64, ModelError> {
    check_gate_params(tau, shift, r_on, alpha)?;
    if !t.is_finite() {
        return Err(ModelError::NonFinite("gate time"));
    }
    Ok(eval_gate(t, tau, shift, r_on, alpha).k)
}

/// Partial derivatives of `k` with respect to `(tau, shift, r_on)`.
///
/// The gate is piecewise linear in the phase; at break points the piece the
/// forward pass selected is used, and the wrap-around jump contributes
/// nothing.
#[inline]
pub fn gate_partials(eval: &GateEval, t: f64, tau: f64, shift: f64, r_on: f64, alpha: f64) -> (f64, f64, f64) {
    let (dk_dphi, dk_dr) = match eval.phase {
        GatePhase::Rising => (2.0 / r_on, -2.0 * eval.phi / (r_on * r_on)),
        GatePhase::Falling => (-2.0 / r_on, 2.0 * eval.phi / (r_on * r_on)),
        GatePhase::Closed => (alpha, 0.0),
    };
    let dphi_dtau = -(t - shift) / (tau * tau);
    let dphi_dshift = -1.0 / tau;
    (dk_dphi * dphi_dtau, dk_dphi * dphi_dshift, dk_dr)
}
