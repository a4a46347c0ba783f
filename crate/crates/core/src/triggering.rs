//! Communication triggering conditions and the constants of the asymptotic
//! formation bound.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::formation::{Gains, SpringMatrix};

/// Scalars shared by every evaluation of the primary condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriggerConstants {
    pub k_e: f64,
    pub alpha_m: f64,
    pub k_c: f64,
    pub kp: f64,
    pub kg: f64,
    pub ks: f64,
    pub k_m: f64,
    pub b: f64,
    pub eta: f64,
    pub eta2: f64,
}

impl TriggerConstants {
    pub fn new(gains: &Gains, k_m: f64, k_c: f64, spring: &SpringMatrix) -> Self {
        Self {
            k_e: gains.ks * gains.kp * gains.kp + gains.kg * gains.kp + gains.kg / gains.b,
            alpha_m: spring.alpha_max(),
            k_c,
            kp: gains.kp,
            kg: gains.kg,
            ks: gains.ks,
            k_m,
            b: gains.b,
            eta: gains.eta,
            eta2: gains.eta2,
        }
    }
}

/// Local quantities agent `i` feeds into the primary condition.
#[derive(Debug, Clone, Copy)]
pub struct TriggerInputs<'a> {
    pub sbar: &'a DVector<f64>,
    pub gbar: &'a DVector<f64>,
    /// Self-estimation error `e_i^i`.
    pub e: &'a DVector<f64>,
    pub edot: &'a DVector<f64>,
    pub qdot: &'a DVector<f64>,
    pub qdot_star: &'a DVector<f64>,
    /// `(k_ji, q̂̇_j^i)` for every neighbor `j`.
    pub neighbor_qhat_dot: &'a [(f64, &'a DVector<f64>)],
    /// Regressor at `(q_i, q̇_i, ṗ̄_i, p̄_i)`.
    pub y: &'a DMatrix<f64>,
    pub delta_theta_max: &'a DVector<f64>,
}

/// Both sides of the primary condition; it fires when `lhs <= rhs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CtcOutcome {
    pub lhs: f64,
    pub rhs: f64,
}

impl CtcOutcome {
    pub fn fired(&self) -> bool {
        self.lhs <= self.rhs
    }
}

/// Evaluates
/// `k_s s̄ᵀs̄ + k_p k_g ḡᵀḡ + η ≤ α_M²(k_e eᵀe + k_p k_M ėᵀė)
///  + α_M k_C² k_p ‖e‖² Σ_j k_ji (‖q̂̇_j‖ + η₂)² + k_g b ‖q̇ − q̇*‖²
///  + k_p ‖e‖ [α_M² (1 + Z) + Z / (1 + Z)]`
/// with `Z = ‖|Y| Δθ_max‖²`.
pub fn ctc_primary(inp: &TriggerInputs<'_>, c: &TriggerConstants) -> CtcOutcome {
    let lhs = c.ks * inp.sbar.norm_squared() + c.kp * c.kg * inp.gbar.norm_squared() + c.eta;
    let e2 = inp.e.norm_squared();
    let e_norm = e2.sqrt();
    let a2 = c.alpha_m * c.alpha_m;
    let neighbor_sum: f64 = inp
        .neighbor_qhat_dot
        .iter()
        .map(|(k, qd)| k * (qd.norm() + c.eta2).powi(2))
        .sum();
    let z = (inp.y.abs() * inp.delta_theta_max).norm_squared();
    let rhs = a2 * (c.k_e * e2 + c.kp * c.k_m * inp.edot.norm_squared())
        + c.alpha_m * c.k_c * c.k_c * c.kp * e2 * neighbor_sum
        + c.kg * c.b * (inp.qdot - inp.qdot_star).norm_squared()
        + c.kp * e_norm * (a2 * (1.0 + z) + z / (1.0 + z));
    CtcOutcome { lhs, rhs }
}

/// Velocity condition `‖q̇_i‖ ≥ ‖q̂̇_i^i‖ + η₂`.
pub fn ctc_velocity(qdot: &DVector<f64>, qhat_dot_self: &DVector<f64>, eta2: f64) -> bool {
    qdot.norm() >= qhat_dot_self.norm() + eta2
}

/// Componentwise `max(|θ̄ − θ_min|, |θ̄ − θ_max|)`.
pub fn delta_theta_max(theta_bar: &DVector<f64>, theta_min: &DVector<f64>, theta_max: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(theta_bar.len(), |l, _| {
        (theta_bar[l] - theta_min[l]).abs().max((theta_bar[l] - theta_max[l]).abs())
    })
}

/// `min{1, k₁, k_p, k_0, 2k_0(2k_0 + α_min k_min/k_max)} / max{1, k_M}` with
/// `k₁ = k_s − (1 + k_p(k_M + 1))`.
pub fn c3(gains: &Gains, k_m: f64, spring: &SpringMatrix) -> f64 {
    let k1 = gains.ks - Gains::ks_threshold(gains.kp, k_m);
    let k0 = gains.k0;
    let coupling = 2.0 * k0 * (2.0 * k0 + spring.alpha_min() * spring.k_min() / spring.k_max());
    let num = [1.0, k1, gains.kp, k0, coupling].into_iter().fold(f64::INFINITY, f64::min);
    num / k_m.max(1.0)
}

/// `ξ = (N/(k_g c₃))(D_max² + η + c₃ Δ_max)`, or `+∞` when `c₃ ≤ 0`.
pub fn xi_bound(agents: usize, kg: f64, c3: f64, d_max: f64, eta: f64, delta_max: f64) -> f64 {
    if c3 <= 0.0 {
        return f64::INFINITY;
    }
    agents as f64 / (kg * c3) * (d_max * d_max + eta + c3 * delta_max)
}

/// Warning attached to results when the bound is unusable.
pub fn xi_warning(c3: f64) -> Option<String> {
    (c3 <= 0.0).then(|| format!("c3 = {c3} is not positive; the formation bound xi is infinite"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoryConstants {
    pub c3: f64,
    pub xi: f64,
    pub delta_max: f64,
    pub alpha_min: f64,
    pub alpha_m: f64,
    pub k_min: f64,
    pub k_max: f64,
}

impl TheoryConstants {
    pub fn new(gains: &Gains, k_m: f64, spring: &SpringMatrix, delta_max: f64) -> Self {
        let c3 = c3(gains, k_m, spring);
        Self {
            c3,
            xi: xi_bound(spring.len(), gains.kg, c3, gains.d_max, gains.eta, delta_max),
            delta_max,
            alpha_min: spring.alpha_min(),
            alpha_m: spring.alpha_max(),
            k_min: spring.k_min(),
            k_max: spring.k_max(),
        }
    }
}
