//! Estimates of neighbor (and own) states held between messages.
//!
//! The accurate estimator integrates a model of the closed loop built from
//! the last received parameters; the zero-order hold keeps the last received
//! state.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formation::{Gains, RefPoint};
use crate::models::{AgentState, ModelSpec};
use crate::network::Message;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Accurate,
    Zoh,
}

/// Agent `owner`'s estimate of agent `subject`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSlot {
    pub owner: usize,
    pub subject: usize,
    pub qhat: DVector<f64>,
    pub qhat_dot: DVector<f64>,
    pub theta_hat: DVector<f64>,
    pub last_reset: f64,
    pub kind: EstimatorKind,
}

impl EstimatorSlot {
    /// A slot that has not yet received any message.
    pub fn empty(owner: usize, subject: usize, n: usize, p: usize, kind: EstimatorKind) -> Self {
        Self {
            owner,
            subject,
            qhat: DVector::zeros(n),
            qhat_dot: DVector::zeros(n),
            theta_hat: DVector::zeros(p),
            last_reset: f64::NEG_INFINITY,
            kind,
        }
    }

    pub fn has_message(&self) -> bool {
        self.last_reset.is_finite()
    }
}

/// Time derivatives of an accurate estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorRate {
    pub qhat_ddot: DVector<f64>,
    pub theta_hat_dot: DVector<f64>,
}

/// Right-hand side of the accurate estimator at the given estimate values.
///
/// `reference` is the subject's target at the evaluation time. The estimated
/// input is
/// `τ̂ = −k_s(ε̂̇ + k_p k_0 ε̂) − k_g k_0 ε̂ + G − Y(q̂, q̂̇, m̂̇, m̂) θ̂`
/// and the estimate obeys `M̂ q̂̈ + Ĉ q̂̇ + G = τ̂`.
pub fn estimator_rate_at(
    model: &ModelSpec,
    qhat: &DVector<f64>,
    qhat_dot: &DVector<f64>,
    theta_hat: &DVector<f64>,
    reference: &RefPoint,
    gains: &Gains,
) -> Result<EstimatorRate> {
    let n = model.dim();
    let eps = qhat - &reference.q;
    let eps_dot = qhat_dot - &reference.qdot;
    let kpk0 = gains.kp * gains.k0;
    let (m, m_dot) = if gains.k0 > 0.0 {
        (&eps * kpk0 - &reference.qdot, &eps_dot * kpk0 - &reference.qddot)
    } else {
        (DVector::zeros(n), DVector::zeros(n))
    };
    let y = model.regressor(qhat, qhat_dot, &m_dot, &m)?;
    let feedback = &eps_dot + &eps * kpk0;
    let tau_hat = -(&feedback * gains.ks) - &eps * (gains.kg * gains.k0) + &model.gravity - &y * theta_hat;
    let qhat_ddot = model.accel_from_theta(theta_hat, qhat, qhat_dot, &tau_hat)?;
    let theta_hat_dot = &gains.gamma * (y.transpose() * feedback);
    Ok(EstimatorRate { qhat_ddot, theta_hat_dot })
}

/// Rate of a slot at its stored values. Zero-order-hold slots have no
/// dynamics.
pub fn estimator_rate(slot: &EstimatorSlot, model: &ModelSpec, reference: &RefPoint, gains: &Gains) -> Result<EstimatorRate> {
    match slot.kind {
        EstimatorKind::Accurate => estimator_rate_at(model, &slot.qhat, &slot.qhat_dot, &slot.theta_hat, reference, gains),
        EstimatorKind::Zoh => Ok(EstimatorRate {
            qhat_ddot: DVector::zeros(slot.qhat.len()),
            theta_hat_dot: DVector::zeros(slot.theta_hat.len()),
        }),
    }
}

/// The held estimate of a zero-order-hold slot (valid for any time in the
/// current inter-message interval).
pub fn zoh_estimate(slot: &EstimatorSlot) -> (DVector<f64>, DVector<f64>) {
    (slot.qhat.clone(), slot.qhat_dot.clone())
}

/// Overwrites the slot with the message payload.
pub fn reset_on_message(slot: &mut EstimatorSlot, msg: &Message) -> Result<()> {
    if msg.sender != slot.subject {
        return Err(Error::Protocol(format!(
            "message from agent {} delivered to slot of agent {}",
            msg.sender, slot.subject
        )));
    }
    if msg.t < slot.last_reset {
        return Err(Error::Protocol(format!(
            "stale message from agent {} (t = {} < last reset {})",
            msg.sender, msg.t, slot.last_reset
        )));
    }
    slot.qhat.copy_from(&msg.q);
    slot.qhat_dot.copy_from(&msg.qdot);
    slot.theta_hat.copy_from(&msg.theta_bar);
    slot.last_reset = msg.t;
    Ok(())
}

/// `(e, ė) = (q̂ − q, q̂̇ − q̇)`.
pub fn estimation_error(slot: &EstimatorSlot, actual: &AgentState) -> (DVector<f64>, DVector<f64>) {
    (&slot.qhat - &actual.q, &slot.qhat_dot - &actual.qdot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn gains(k0: f64) -> Gains {
        Gains {
            kp: 1.0,
            kg: 15.0,
            ks: 3.0,
            k0,
            eta: 0.0,
            eta2: 7.5,
            b: 1.0 / 15.0,
            gamma: DMatrix::identity(2, 2),
            dt: 0.01,
            t_final: 2.0,
            d_max: 0.0,
        }
    }

    fn still(q: DVector<f64>) -> RefPoint {
        RefPoint { q, qdot: v(&[0.0, 0.0]), qddot: v(&[0.0, 0.0]) }
    }

    fn msg(sender: usize, t: f64) -> Message {
        Message { sender, t, q: v(&[1.0, 2.0]), qdot: v(&[0.5, -0.5]), theta_bar: v(&[1.0, 0.1]) }
    }

    #[test]
    fn at_target_formation_rate_is_drag_only() {
        let model = ModelSpec::double_integrator(0.1);
        let q = v(&[1.0, 1.0]);
        let qd = v(&[0.0, 0.0]);
        let rate = estimator_rate_at(&model, &q, &qd, &model.theta_true, &still(q.clone()), &gains(0.0)).unwrap();
        assert_eq!(rate.qhat_ddot, v(&[0.0, 0.0]));
        assert_eq!(rate.theta_hat_dot, v(&[0.0, 0.0]));
    }

    #[test]
    fn formation_estimate_damps_velocity() {
        // k_0 = 0, q̇* = 0: τ̂ = −k_s q̂̇ and q̂̈ = −k_s q̂̇ − 0.1‖q̂̇‖q̂̇.
        let model = ModelSpec::double_integrator(0.1);
        let q = v(&[0.0, 0.0]);
        let qd = v(&[3.0, 4.0]);
        let rate = estimator_rate_at(&model, &q, &qd, &model.theta_true, &still(q.clone()), &gains(0.0)).unwrap();
        let expected = -(&qd * 3.0) - &qd * 0.5;
        assert!((rate.qhat_ddot - expected).amax() < 1e-14);
        assert_eq!(rate.theta_hat_dot, v(&[0.0, 0.0]));
    }

    #[test]
    fn reset_examples() {
        let mut a = EstimatorSlot::empty(0, 1, 2, 2, EstimatorKind::Accurate);
        let mut b = EstimatorSlot::empty(2, 1, 2, 2, EstimatorKind::Accurate);
        let m = msg(1, 0.3);
        reset_on_message(&mut a, &m).unwrap();
        reset_on_message(&mut b, &m).unwrap();
        assert_eq!((&a.qhat, &a.qhat_dot, &a.theta_hat), (&b.qhat, &b.qhat_dot, &b.theta_hat));
        let actual = AgentState::new(m.q.clone(), m.qdot.clone()).unwrap();
        let (e, ed) = estimation_error(&a, &actual);
        assert_eq!((e, ed), (v(&[0.0, 0.0]), v(&[0.0, 0.0])));
        assert_eq!(a.last_reset, 0.3);
    }

    #[test]
    fn stale_or_misrouted_messages_rejected() {
        let mut a = EstimatorSlot::empty(0, 1, 2, 2, EstimatorKind::Zoh);
        reset_on_message(&mut a, &msg(1, 0.5)).unwrap();
        assert!(matches!(reset_on_message(&mut a, &msg(1, 0.4)), Err(Error::Protocol(_))));
        assert!(matches!(reset_on_message(&mut a, &msg(2, 0.6)), Err(Error::Protocol(_))));
    }

    #[test]
    fn zoh_holds_values() {
        let model = ModelSpec::double_integrator(0.1);
        let mut a = EstimatorSlot::empty(0, 0, 2, 2, EstimatorKind::Zoh);
        reset_on_message(&mut a, &msg(0, 0.0)).unwrap();
        assert_eq!(zoh_estimate(&a), (v(&[1.0, 2.0]), v(&[0.5, -0.5])));
        let rate = estimator_rate(&a, &model, &still(v(&[0.0, 0.0])), &gains(2.0)).unwrap();
        assert_eq!(rate.qhat_ddot, v(&[0.0, 0.0]));
    }

    #[test]
    fn estimation_error_offset() {
        let mut a = EstimatorSlot::empty(0, 0, 2, 2, EstimatorKind::Zoh);
        a.qhat = v(&[2.0, 2.0]);
        let actual = AgentState::at_rest(v(&[1.0, 2.0]));
        assert_eq!(estimation_error(&a, &actual).0, v(&[1.0, 0.0]));
    }
}
