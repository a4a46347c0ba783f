//! Classical fixed-step fourth-order Runge-Kutta.

use nalgebra::DVector;

use crate::error::Result;

/// Advances `y` from `t` to `t + h`. The right-hand side may fail, in which
/// case the step is abandoned.
pub fn rk4_step<F>(t: f64, y: &DVector<f64>, h: f64, mut f: F) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = f(t, y)?;
    let k2 = f(t + 0.5 * h, &(y + &k1 * (0.5 * h)))?;
    let k3 = f(t + 0.5 * h, &(y + &k2 * (0.5 * h)))?;
    let k4 = f(t + h, &(y + &k3 * h))?;
    Ok(y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}
