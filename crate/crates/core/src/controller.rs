//! Adaptive distributed control input and the adaptation law of `θ̄`.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::formation::{Gains, RefPoint};
use crate::models::ModelSpec;

/// Feedback quantities an agent computes from its own state and its
/// estimates of its neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct Feedback {
    pub gbar: DVector<f64>,
    pub gbar_dot: DVector<f64>,
    pub sbar: DVector<f64>,
}

impl Feedback {
    /// `p̄ = k_p ḡ − q̇*`.
    pub fn pbar(&self, kp: f64, reference: &RefPoint) -> DVector<f64> {
        &self.gbar * kp - &reference.qdot
    }

    /// `ṗ̄ = k_p ġ̄ − q̈*`.
    pub fn pbar_dot(&self, kp: f64, reference: &RefPoint) -> DVector<f64> {
        &self.gbar_dot * kp - &reference.qddot
    }
}

/// Regressor evaluated at `(q, q̇, ṗ̄, p̄)`, shared by the control input, the
/// adaptation law and the triggering condition.
pub fn control_regressor(
    model: &ModelSpec,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    fb: &Feedback,
    reference: &RefPoint,
    kp: f64,
) -> Result<DMatrix<f64>> {
    model.regressor(q, qdot, &fb.pbar_dot(kp, reference), &fb.pbar(kp, reference))
}

/// `τ = −k_s s̄ − k_g ḡ + G − Y(q, q̇, ṗ̄, p̄) θ̄`.
pub fn control_input(
    model: &ModelSpec,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    fb: &Feedback,
    reference: &RefPoint,
    theta_bar: &DVector<f64>,
    gains: &Gains,
) -> Result<DVector<f64>> {
    let y = control_regressor(model, q, qdot, fb, reference, gains.kp)?;
    Ok(-(&fb.sbar * gains.ks) - &fb.gbar * gains.kg + &model.gravity - y * theta_bar)
}

/// `dθ̄/dt = Γ Yᵀ s̄`.
pub fn theta_bar_rate(y: &DMatrix<f64>, sbar: &DVector<f64>, gamma: &DMatrix<f64>) -> DVector<f64> {
    gamma * (y.transpose() * sbar)
}
