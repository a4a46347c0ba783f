//! Euler-Lagrange plant models: the planar double integrator with a
//! velocity-proportional Coriolis term and the three-DOF surface ship.
//!
//! Every model exposes the same quantities: the inertia matrix `M(q)`, the
//! Coriolis/centripetal (plus damping) matrix `C(q, q̇)`, and a regressor `Y`
//! satisfying `M(q) x1 + C(q, q̇) x2 = Y(q, q̇, x1, x2) θ`. The direct
//! evaluators and the regressor are written independently so each can check
//! the other.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};

/// Which of the two shipped plant families a model belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Di,
    Ss,
}

impl ModelKind {
    pub fn dim(self) -> usize {
        match self {
            ModelKind::Di => 2,
            ModelKind::Ss => 3,
        }
    }

    pub fn param_count(self) -> usize {
        match self {
            ModelKind::Di => 2,
            ModelKind::Ss => SHIP_PARAMS,
        }
    }
}

/// Position/velocity pair of one agent in the earth-fixed frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
}

impl AgentState {
    pub fn new(q: DVector<f64>, qdot: DVector<f64>) -> Result<Self> {
        check_len("agent velocity", qdot.len(), q.len())?;
        check_finite("agent position", q.as_slice())?;
        check_finite("agent velocity", qdot.as_slice())?;
        Ok(Self { q, qdot })
    }

    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        Self { q, qdot: DVector::zeros(n) }
    }
}

/// Coefficients of the body-frame Coriolis matrix
///
/// ```text
/// C_b(v) = [ 0                 0          c13_v v + c13_r r ]
///          [ 0                 0          c23_u u           ]
///          [ c31_v v + c31_r r c32_u u    0                 ]
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoriolisCoeffs {
    pub c13_v: f64,
    pub c13_r: f64,
    pub c23_u: f64,
    pub c31_v: f64,
    pub c31_r: f64,
    pub c32_u: f64,
}

/// Body-frame surface ship parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShipBodyParams {
    pub mass: Matrix3<f64>,
    pub coriolis: CoriolisCoeffs,
    pub damping: Matrix3<f64>,
}

const SHIP_PARAMS: usize = 16;

impl ShipBodyParams {
    /// The constants of the reference ship used in all shipped scenarios.
    pub fn reference() -> Self {
        Self {
            mass: Matrix3::new(25.8, 0.0, 0.0, 0.0, 33.8, 1.0115, 0.0, 1.0115, 2.76),
            coriolis: CoriolisCoeffs {
                c13_v: -33.8,
                c13_r: -1.0115,
                c23_u: 25.8,
                c31_v: 33.8,
                c31_r: 1.0115,
                c32_u: -25.8,
            },
            damping: Matrix3::new(0.72, 0.0, 0.0, 0.0, 0.86, -0.11, 0.0, -0.11, -0.5),
        }
    }

    pub fn coriolis_body(&self, v: &Vector3<f64>) -> Matrix3<f64> {
        let c = &self.coriolis;
        let (u, sway, r) = (v[0], v[1], v[2]);
        Matrix3::new(
            0.0,
            0.0,
            c.c13_v * sway + c.c13_r * r,
            0.0,
            0.0,
            c.c23_u * u,
            c.c31_v * sway + c.c31_r * r,
            c.c32_u * u,
            0.0,
        )
    }

    /// Linear parametrization used by the ship regressor.
    ///
    /// Order: `m11 m22 m23 m32 m33 | c13_v c13_r c23_u c31_v c31_r c32_u |
    /// d11 d22 d23 d32 d33`. Entries that are structurally zero in the body
    /// matrices are not parameters.
    pub fn to_theta(&self) -> DVector<f64> {
        let m = &self.mass;
        let c = &self.coriolis;
        let d = &self.damping;
        DVector::from_vec(vec![
            m[(0, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 1)],
            m[(2, 2)],
            c.c13_v,
            c.c13_r,
            c.c23_u,
            c.c31_v,
            c.c31_r,
            c.c32_u,
            d[(0, 0)],
            d[(1, 1)],
            d[(1, 2)],
            d[(2, 1)],
            d[(2, 2)],
        ])
    }

    pub fn from_theta(theta: &DVector<f64>) -> Result<Self> {
        check_len("ship parameter vector", theta.len(), SHIP_PARAMS)?;
        let t = theta.as_slice();
        Ok(Self {
            mass: Matrix3::new(t[0], 0.0, 0.0, 0.0, t[1], t[2], 0.0, t[3], t[4]),
            coriolis: CoriolisCoeffs {
                c13_v: t[5],
                c13_r: t[6],
                c23_u: t[7],
                c31_v: t[8],
                c31_r: t[9],
                c32_u: t[10],
            },
            damping: Matrix3::new(t[11], 0.0, 0.0, 0.0, t[12], t[13], 0.0, t[14], t[15]),
        })
    }
}

/// Physical parameters of the plant. The direct `M`/`C` evaluators read these;
/// the regressor only knows the structure.
#[derive(Debug, Clone, PartialEq)]
pub enum Plant {
    /// `M = mass * I`, `C = drag * ‖q̇‖ * I`.
    DoubleIntegrator { mass: f64, drag: f64 },
    SurfaceShip(ShipBodyParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub plant: Plant,
    pub theta_true: DVector<f64>,
    pub theta_min: DVector<f64>,
    pub theta_max: DVector<f64>,
    pub gravity: DVector<f64>,
    /// Upper bound on `λ_max(M)`.
    pub k_m: f64,
    /// `‖C(q, q̇)‖ ≤ k_c ‖q̇‖` (away from rest for the ship, see `coriolis_matrix`).
    pub k_c: f64,
}

/// Symmetric bound vectors `θ ∓ frac·|θ|`.
fn bounds_around(theta: &DVector<f64>, frac: f64) -> (DVector<f64>, DVector<f64>) {
    let lo = theta.map(|t| t - frac * t.abs());
    let hi = theta.map(|t| t + frac * t.abs());
    (lo, hi)
}

impl ModelSpec {
    pub fn double_integrator(bound_frac: f64) -> Self {
        let (mass, drag) = (1.0, 0.1);
        let theta = DVector::from_vec(vec![mass, drag]);
        let (lo, hi) = bounds_around(&theta, bound_frac);
        Self {
            plant: Plant::DoubleIntegrator { mass, drag },
            theta_true: theta,
            theta_min: lo,
            theta_max: hi,
            gravity: DVector::zeros(2),
            k_m: 1.0,
            k_c: 0.1,
        }
    }

    pub fn surface_ship(ship: ShipBodyParams, bound_frac: f64) -> Self {
        let theta = ship.to_theta();
        let (lo, hi) = bounds_around(&theta, bound_frac);
        // J is a rotation, so λ_max(J M_b Jᵀ) = λ_max(sym(M_b)).
        let sym = (ship.mass + ship.mass.transpose()) * 0.5;
        let k_m = sym.symmetric_eigenvalues().max();
        Self {
            plant: Plant::SurfaceShip(ship),
            theta_true: theta,
            theta_min: lo,
            theta_max: hi,
            gravity: DVector::zeros(3),
            k_m,
            k_c: 43.96,
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self.plant {
            Plant::DoubleIntegrator { .. } => ModelKind::Di,
            Plant::SurfaceShip(_) => ModelKind::Ss,
        }
    }

    pub fn dim(&self) -> usize {
        self.kind().dim()
    }

    pub fn param_count(&self) -> usize {
        self.kind().param_count()
    }

    /// Checks the structural invariants: bound ordering, positive norm bounds
    /// and dimensions.
    pub fn validate(&self) -> Result<()> {
        let p = self.param_count();
        check_len("theta_true", self.theta_true.len(), p)?;
        check_len("theta_min", self.theta_min.len(), p)?;
        check_len("theta_max", self.theta_max.len(), p)?;
        check_len("gravity", self.gravity.len(), self.dim())?;
        for l in 0..p {
            let (lo, t, hi) = (self.theta_min[l], self.theta_true[l], self.theta_max[l]);
            if !(lo < t && t < hi) {
                return Err(Error::Validation(format!(
                    "parameter bounds require theta_min < theta < theta_max (component {l}: {lo} < {t} < {hi})"
                )));
            }
        }
        if !(self.k_m > 0.0 && self.k_c > 0.0) {
            return Err(Error::Validation("k_M and k_C must be positive".into()));
        }
        Ok(())
    }

    fn check_vec(&self, label: &str, v: &DVector<f64>) -> Result<()> {
        check_len(label, v.len(), self.dim())?;
        check_finite(label, v.as_slice())
    }

    /// Inertia matrix in the earth-fixed frame.
    pub fn mass_matrix(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_vec("q", q)?;
        Ok(match &self.plant {
            Plant::DoubleIntegrator { mass, .. } => DMatrix::identity(2, 2) * *mass,
            Plant::SurfaceShip(ship) => {
                let j = body_to_earth(q[2]);
                // J⁻¹ = Jᵀ
                to_dyn(&(j * ship.mass * j.transpose()))
            }
        })
    }

    /// Coriolis, centripetal and damping terms in the earth-fixed frame.
    ///
    /// For the ship, `C = J [C_b(Jᵀq̇) − M_b Jᵀ J̇ + D_b] Jᵀ` with
    /// `J̇ = ψ̇ dJ/dψ`. Because `D_b` does not vanish at rest, the bound
    /// `‖C‖ ≤ k_C ‖q̇‖` only holds once `‖q̇‖` is large enough to dominate it.
    pub fn coriolis_matrix(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_vec("q", q)?;
        self.check_vec("qdot", qdot)?;
        Ok(match &self.plant {
            Plant::DoubleIntegrator { drag, .. } => DMatrix::identity(2, 2) * (*drag * qdot.norm()),
            Plant::SurfaceShip(ship) => {
                let psi = q[2];
                let j = body_to_earth(psi);
                let jt = j.transpose();
                let (s, c) = psi.sin_cos();
                let dj_dpsi = Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0);
                let j_dot = dj_dpsi * qdot[2];
                let v_body = jt * Vector3::new(qdot[0], qdot[1], qdot[2]);
                let inner = ship.coriolis_body(&v_body) - ship.mass * jt * j_dot + ship.damping;
                to_dyn(&(j * inner * jt))
            }
        })
    }

    /// Regressor `Y(q, q̇, x1, x2)` with `Y θ = M(q) x1 + C(q, q̇) x2`.
    pub fn regressor(
        &self,
        q: &DVector<f64>,
        qdot: &DVector<f64>,
        x1: &DVector<f64>,
        x2: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        self.check_vec("q", q)?;
        self.check_vec("qdot", qdot)?;
        self.check_vec("x1", x1)?;
        self.check_vec("x2", x2)?;
        Ok(match self.kind() {
            ModelKind::Di => {
                let speed = qdot.norm();
                let mut y = DMatrix::zeros(2, 2);
                y.set_column(0, x1);
                y.set_column(1, &(x2 * speed));
                y
            }
            ModelKind::Ss => ship_regressor(q, qdot, x1, x2),
        })
    }

    /// Solves `M(q) q̈ = τ + d − C(q, q̇) q̇ − G` for the true plant.
    pub fn dynamics_accel(&self, state: &AgentState, tau: &DVector<f64>, d: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_vec("tau", tau)?;
        self.check_vec("d", d)?;
        let m = self.mass_matrix(&state.q)?;
        let c = self.coriolis_matrix(&state.q, &state.qdot)?;
        let rhs = tau + d - c * &state.qdot - &self.gravity;
        m.lu()
            .solve(&rhs)
            .ok_or_else(|| Error::ModelViolation("singular inertia matrix".into()))
    }

    /// Inertia estimate built column by column from the regressor and a
    /// parameter vector: `M̂ e_k = Y(q, q̇, e_k, 0) θ`.
    pub fn mass_from_theta(&self, theta: &DVector<f64>, q: &DVector<f64>, qdot: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.dim();
        let zero = DVector::zeros(n);
        let mut m = DMatrix::zeros(n, n);
        for k in 0..n {
            let mut e = DVector::zeros(n);
            e[k] = 1.0;
            let col = self.regressor(q, qdot, &e, &zero)? * theta;
            m.set_column(k, &col);
        }
        Ok(m)
    }

    /// Acceleration of the parametrized model `M̂ a + Ĉ q̇ + G = force`,
    /// where `M̂`, `Ĉ` follow from `theta` through the regressor.
    pub fn accel_from_theta(
        &self,
        theta: &DVector<f64>,
        q: &DVector<f64>,
        qdot: &DVector<f64>,
        force: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let m_hat = self.mass_from_theta(theta, q, qdot)?;
        let zero = DVector::zeros(self.dim());
        let c_qdot = self.regressor(q, qdot, &zero, qdot)? * theta;
        let rhs = force - c_qdot - &self.gravity;
        m_hat
            .lu()
            .solve(&rhs)
            .filter(|a| a.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::EstimatorDivergence("singular estimated inertia matrix".into()))
    }
}

fn to_dyn(m: &Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_iterator(3, 3, m.iter().copied())
}

fn ship_regressor(q: &DVector<f64>, qdot: &DVector<f64>, x1: &DVector<f64>, x2: &DVector<f64>) -> DMatrix<f64> {
    let j = body_to_earth(q[2]);
    let jt = j.transpose();
    let v = jt * Vector3::new(qdot[0], qdot[1], qdot[2]);
    let y1 = jt * Vector3::new(x1[0], x1[1], x1[2]);
    let w = jt * Vector3::new(x2[0], x2[1], x2[2]);
    let (u, sway, r) = (v[0], v[1], v[2]);
    // M_b (y1 − r S w) absorbs the −M_b Jᵀ J̇ term, with Jᵀ J̇ = r S.
    let a = Vector3::new(y1[0] + r * w[1], y1[1] - r * w[0], y1[2]);

    let mut body = nalgebra::SMatrix::<f64, 3, SHIP_PARAMS>::zeros();
    body[(0, 0)] = a[0];
    body[(1, 1)] = a[1];
    body[(1, 2)] = a[2];
    body[(2, 3)] = a[1];
    body[(2, 4)] = a[2];
    body[(0, 5)] = sway * w[2];
    body[(0, 6)] = r * w[2];
    body[(1, 7)] = u * w[2];
    body[(2, 8)] = sway * w[0];
    body[(2, 9)] = r * w[0];
    body[(2, 10)] = u * w[1];
    body[(0, 11)] = w[0];
    body[(1, 12)] = w[1];
    body[(1, 13)] = w[2];
    body[(2, 14)] = w[1];
    body[(2, 15)] = w[2];
    let earth = j * body;
    DMatrix::from_iterator(3, SHIP_PARAMS, earth.iter().copied())
}

/// Rotation `J(ψ)` about the vertical axis mapping body velocities to the
/// earth-fixed frame.
pub fn body_to_earth(psi: f64) -> Matrix3<f64> {
    let (s, c) = psi.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Draws one perturbation vector with i.i.d. components uniform on
/// `[−D_max/√3, D_max/√3]`. For `n ≤ 3` this guarantees `‖d‖ ≤ D_max`.
pub fn sample_perturbation<R: Rng + ?Sized>(rng: &mut R, d_max: f64, n: usize) -> Result<DVector<f64>> {
    if !(d_max >= 0.0) || !d_max.is_finite() {
        return Err(Error::InvalidInput(format!("D_max must be finite and nonnegative, got {d_max}")));
    }
    let half_width = d_max / 3f64.sqrt();
    // Always consume n draws so the stream does not depend on D_max.
    Ok(DVector::from_fn(n, |_, _| half_width * (2.0 * rng.gen::<f64>() - 1.0)))
}

/// Multiplies every entry of the body matrices by `1 + 0.1 ξ` with
/// `ξ ∈ {−1, +1}` equiprobable.
pub fn perturb_model_params<R: Rng + ?Sized>(rng: &mut R, ship: &ShipBodyParams) -> ShipBodyParams {
    perturb_model_params_with(ship, || if rng.gen::<bool>() { 1.0 } else { -1.0 })
}

/// Same as [`perturb_model_params`] with an explicit sign source. 27 signs are
/// drawn, row-major, for the mass, Coriolis and damping matrices in turn.
pub fn perturb_model_params_with(ship: &ShipBodyParams, mut sign: impl FnMut() -> f64) -> ShipBodyParams {
    let mut factors = [[1.0f64; 9]; 3];
    for matrix in factors.iter_mut() {
        for f in matrix.iter_mut() {
            *f = 1.0 + 0.1 * sign();
        }
    }
    let hadamard = |m: &Matrix3<f64>, f: &[f64; 9]| Matrix3::from_fn(|r, c| m[(r, c)] * f[3 * r + c]);
    let cf = &factors[1];
    let c = ship.coriolis;
    ShipBodyParams {
        mass: hadamard(&ship.mass, &factors[0]),
        coriolis: CoriolisCoeffs {
            c13_v: c.c13_v * cf[2],
            c13_r: c.c13_r * cf[2],
            c23_u: c.c23_u * cf[5],
            c31_v: c.c31_v * cf[6],
            c31_r: c.c31_r * cf[6],
            c32_u: c.c32_u * cf[7],
        },
        damping: hadamard(&ship.damping, &factors[2]),
    }
}
