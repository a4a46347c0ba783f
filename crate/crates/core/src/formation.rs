//! Formation geometry: spring coefficients, target offsets, the potential
//! energy and the disagreement vectors `g` and `s`, and the reference
//! trajectory of the first agent.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};

/// Symmetric matrix of spring coefficients. Nonzero entries also define the
/// communication graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SpringMatrix {
    k: DMatrix<f64>,
}

impl SpringMatrix {
    pub fn new(k: DMatrix<f64>) -> Result<Self> {
        let n = k.nrows();
        if n == 0 || k.ncols() != n {
            return Err(Error::Validation(format!("spring matrix must be square and nonempty, got {}x{}", n, k.ncols())));
        }
        check_finite("spring matrix", k.as_slice())?;
        let mut edges = 0;
        for i in 0..n {
            if k[(i, i)] != 0.0 {
                return Err(Error::Validation(format!("spring matrix diagonal must be zero (k[{i}][{i}] = {})", k[(i, i)])));
            }
            for j in 0..n {
                if k[(i, j)] < 0.0 {
                    return Err(Error::Validation(format!("spring coefficient k[{i}][{j}] is negative")));
                }
                if k[(i, j)] != k[(j, i)] {
                    return Err(Error::Validation(format!(
                        "spring matrix must be symmetric (k[{i}][{j}] = {} but k[{j}][{i}] = {})",
                        k[(i, j)],
                        k[(j, i)]
                    )));
                }
                if j > i && k[(i, j)] > 0.0 {
                    edges += 1;
                }
            }
        }
        if edges + 1 < n {
            return Err(Error::Validation(format!("spring graph needs at least {} edges, got {edges}", n - 1)));
        }
        let spring = Self { k };
        if !spring.is_connected() {
            return Err(Error::Validation("spring graph is not connected".into()));
        }
        Ok(spring)
    }

    /// Six agents on a ring, each tied to `i±1` and `i+3`.
    pub fn hexagon() -> Self {
        let n = 6;
        let k = DMatrix::from_fn(n, n, |i, j| {
            let d = (j + n - i) % n;
            match d {
                1 | 5 => 0.185,
                3 => 0.0926,
                _ => 0.0,
            }
        });
        Self::new(k).expect("hexagon spring matrix is valid")
    }

    pub fn len(&self) -> usize {
        self.k.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.k.nrows() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.k[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.k[(i, j)] > 0.0).collect()
    }

    /// `α_i = Σ_j k_ij`.
    pub fn row_sum(&self, i: usize) -> f64 {
        self.k.row(i).sum()
    }

    pub fn alpha_max(&self) -> f64 {
        (0..self.len()).map(|i| self.row_sum(i)).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn alpha_min(&self) -> f64 {
        (0..self.len()).map(|i| self.row_sum(i)).fold(f64::INFINITY, f64::min)
    }

    /// Smallest nonzero coefficient.
    pub fn k_min(&self) -> f64 {
        self.k.iter().copied().filter(|&v| v > 0.0).fold(f64::INFINITY, f64::min)
    }

    pub fn k_max(&self) -> f64 {
        self.k.iter().copied().fold(0.0, f64::max)
    }

    fn is_connected(&self) -> bool {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in self.neighbors(i) {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Trajectory followed by the first agent's target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ReferenceTrajectory {
    /// Fixed at `origin`.
    Stationary { origin: Vec<f64> },
    /// Velocity `[a sin ωt, a cos ωt, c t]` (planar models use the first two
    /// components) starting at `origin`.
    Sinusoid { origin: Vec<f64>, amplitude: f64, omega: f64, yaw_accel: f64 },
}

/// Position, velocity and acceleration of a target at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct RefPoint {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub qddot: DVector<f64>,
}

impl ReferenceTrajectory {
    pub fn origin(&self) -> &[f64] {
        match self {
            ReferenceTrajectory::Stationary { origin } | ReferenceTrajectory::Sinusoid { origin, .. } => origin,
        }
    }

    pub fn is_stationary(&self) -> bool {
        matches!(self, ReferenceTrajectory::Stationary { .. })
    }

    pub fn eval(&self, t: f64) -> RefPoint {
        let o = DVector::from_row_slice(self.origin());
        let n = o.len();
        match *self {
            ReferenceTrajectory::Stationary { .. } => RefPoint { q: o, qdot: DVector::zeros(n), qddot: DVector::zeros(n) },
            ReferenceTrajectory::Sinusoid { amplitude: a, omega: w, yaw_accel: c, .. } => {
                let (s, co) = (w * t).sin_cos();
                let pos = [a / w * (1.0 - co), a / w * s, 0.5 * c * t * t];
                let vel = [a * s, a * co, c * t];
                let acc = [a * w * co, -a * w * s, c];
                RefPoint {
                    q: DVector::from_fn(n, |i, _| o[i] + pos[i]),
                    qdot: DVector::from_fn(n, |i, _| vel[i]),
                    qddot: DVector::from_fn(n, |i, _| acc[i]),
                }
            }
        }
    }
}

/// Controller, triggering and scenario gains.
#[derive(Debug, Clone, PartialEq)]
pub struct Gains {
    pub kp: f64,
    pub kg: f64,
    pub ks: f64,
    pub k0: f64,
    pub eta: f64,
    pub eta2: f64,
    pub b: f64,
    pub gamma: DMatrix<f64>,
    pub dt: f64,
    pub t_final: f64,
    pub d_max: f64,
}

impl Gains {
    /// Smallest admissible `k_s`.
    pub fn ks_threshold(kp: f64, k_m: f64) -> f64 {
        1.0 + kp * (k_m + 1.0)
    }

    /// Upper bound (exclusive) on `b`.
    pub fn b_limit(&self) -> f64 {
        self.ks / (self.ks * self.kp + self.kg)
    }

    pub fn validate(&self, k_m: f64, p: usize) -> Result<()> {
        let scalars = [self.kp, self.kg, self.ks, self.k0, self.eta, self.eta2, self.b, self.dt, self.t_final, self.d_max];
        check_finite("gains", &scalars)?;
        let fail = |m: String| Err(Error::Validation(m));
        if self.kp <= 0.0 {
            return fail(format!("k_p must be positive, got {}", self.kp));
        }
        if self.kg <= 0.0 {
            return fail(format!("k_g must be positive, got {}", self.kg));
        }
        if self.k0 < 0.0 {
            return fail(format!("k_0 must be nonnegative, got {}", self.k0));
        }
        if self.eta < 0.0 {
            return fail(format!("eta must be nonnegative, got {}", self.eta));
        }
        if self.eta2 <= 0.0 {
            return fail(format!("eta2 must be positive, got {}", self.eta2));
        }
        if self.d_max < 0.0 {
            return fail(format!("d_max must be nonnegative, got {}", self.d_max));
        }
        let ks_min = Self::ks_threshold(self.kp, k_m);
        // Tolerate rounding when k_s was computed from the same formula.
        if self.ks < ks_min * (1.0 - 1e-12) {
            return fail(format!("k_s = {} violates k_s >= 1 + k_p(k_M + 1) = {ks_min}", self.ks));
        }
        if !(self.b > 0.0 && self.b < self.b_limit()) {
            return fail(format!("b = {} violates 0 < b < k_s/(k_s k_p + k_g) = {}", self.b, self.b_limit()));
        }
        if !(self.dt > 0.0 && self.t_final > 0.0) {
            return fail("dt and T must be positive".into());
        }
        let steps = self.t_final / self.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return fail(format!("T = {} is not a multiple of dt = {}", self.t_final, self.dt));
        }
        if self.gamma.nrows() != p || self.gamma.ncols() != p {
            return Err(Error::Dimension(format!("Gamma must be {p}x{p}, got {}x{}", self.gamma.nrows(), self.gamma.ncols())));
        }
        check_finite("Gamma", self.gamma.as_slice())?;
        if (&self.gamma - self.gamma.transpose()).amax() > 0.0 {
            return fail("Gamma must be symmetric".into());
        }
        if self.gamma.clone().cholesky().is_none() {
            return fail("Gamma must be positive definite".into());
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }
}

/// Target geometry plus gains for a whole team.
#[derive(Debug, Clone, PartialEq)]
pub struct FormationSpec {
    /// Position of agent `i` relative to agent 0 in the target formation
    /// (`r*_{i1}`); `offsets[0]` is zero.
    pub offsets: Vec<DVector<f64>>,
    pub spring: SpringMatrix,
    pub reference: ReferenceTrajectory,
    pub gains: Gains,
}

impl FormationSpec {
    pub fn agents(&self) -> usize {
        self.offsets.len()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        check_len("offsets", self.offsets.len(), self.spring.len())?;
        for (i, o) in self.offsets.iter().enumerate() {
            check_len(&format!("offset of agent {i}"), o.len(), n)?;
            check_finite("offsets", o.as_slice())?;
        }
        if self.offsets[0].iter().any(|&v| v != 0.0) {
            return Err(Error::Validation("offset of the first agent must be zero".into()));
        }
        check_len("reference origin", self.reference.origin().len(), n)?;
        check_finite("reference origin", self.reference.origin())?;
        Ok(())
    }

    /// `r*_ij`, the target value of `q_i − q_j`.
    pub fn r_star(&self, i: usize, j: usize) -> DVector<f64> {
        &self.offsets[i] - &self.offsets[j]
    }
}

/// `P = ½ Σ_i Σ_j k_ij ‖r_ij − r*_ij‖²`.
pub fn potential_energy(q: &[DVector<f64>], spec: &FormationSpec) -> Result<f64> {
    check_len("configuration", q.len(), spec.agents())?;
    let n = spec.agents();
    let mut p = 0.0;
    for i in 0..n {
        for j in 0..n {
            let k = spec.spring.get(i, j);
            if k > 0.0 {
                p += k * (&q[i] - &q[j] - spec.r_star(i, j)).norm_squared();
            }
        }
    }
    Ok(0.5 * p)
}

/// `Σ_j k_ij (r_ij − r*_ij) + k_0 ε_i`.
///
/// `positions` lists `(j, q_j)` as agent `i` sees it: true positions give
/// `g_i`, estimates give `ḡ_i`. Entries with `k_ij = 0` are ignored; every
/// neighbor must be present.
pub fn g_term(
    i: usize,
    q_i: &DVector<f64>,
    positions: &[(usize, &DVector<f64>)],
    spec: &FormationSpec,
    eps_i: &DVector<f64>,
) -> Result<DVector<f64>> {
    let mut g = eps_i * spec.gains.k0;
    accumulate(i, q_i, positions, &spec.spring, |j| Some(spec.r_star(i, j)), &mut g)?;
    Ok(g)
}

/// Time derivative of [`g_term`] for constant targets:
/// `Σ_j k_ij (q̇_i − q̇_j) + k_0 (q̇_i − q̇*_i)`.
pub fn g_dot_term(
    i: usize,
    qdot_i: &DVector<f64>,
    velocities: &[(usize, &DVector<f64>)],
    spec: &FormationSpec,
    eps_dot_i: &DVector<f64>,
) -> Result<DVector<f64>> {
    let mut g = eps_dot_i * spec.gains.k0;
    accumulate(i, qdot_i, velocities, &spec.spring, |_| None, &mut g)?;
    Ok(g)
}

fn accumulate(
    i: usize,
    x_i: &DVector<f64>,
    others: &[(usize, &DVector<f64>)],
    spring: &SpringMatrix,
    target: impl Fn(usize) -> Option<DVector<f64>>,
    out: &mut DVector<f64>,
) -> Result<()> {
    for j in spring.neighbors(i) {
        let x_j = others
            .iter()
            .find(|(id, _)| *id == j)
            .map(|(_, x)| *x)
            .ok_or_else(|| Error::InvalidInput(format!("agent {i} is missing neighbor {j}")))?;
        check_len("neighbor vector", x_j.len(), x_i.len())?;
        let mut r = x_i - x_j;
        if let Some(rs) = target(j) {
            r -= rs;
        }
        *out += r * spring.get(i, j);
    }
    Ok(())
}

/// `s_i = q̇_i − q̇*_i + k_p g_i`.
pub fn s_term(qdot_i: &DVector<f64>, qdot_star_i: &DVector<f64>, kp: f64, g_i: &DVector<f64>) -> DVector<f64> {
    qdot_i - qdot_star_i + g_i * kp
}

/// Target of agent `i` at time `t`: the first agent's reference shifted by
/// the constant offset.
pub fn agent_reference(i: usize, t: f64, spec: &FormationSpec) -> RefPoint {
    let mut r = spec.reference.eval(t);
    r.q += &spec.offsets[i];
    r
}
