//! Invariant battery behind the `verify` subcommand.

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cli::{preset, PRESETS};
use crate::formation::SpringMatrix;
use crate::models::{body_to_earth, ModelSpec, ShipBodyParams};
use crate::simulation::run;

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Break the symmetry of the spring matrix before validating it.
    pub inject_asymmetric_k: bool,
    /// Random draws per sampled property.
    pub draws: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check { name: name.into(), passed, detail });
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-scale..scale))
}

/// Largest `‖Yθ − (M x1 + C x2)‖` over random draws.
pub fn regressor_residual(model: &ModelSpec, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.dim();
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let q = random_vec(&mut rng, n, 10.0);
        let qd = random_vec(&mut rng, n, 5.0);
        let x1 = random_vec(&mut rng, n, 5.0);
        let x2 = random_vec(&mut rng, n, 5.0);
        let y = model.regressor(&q, &qd, &x1, &x2).expect("finite inputs");
        let direct = model.mass_matrix(&q).unwrap() * &x1 + model.coriolis_matrix(&q, &qd).unwrap() * &x2;
        worst = worst.max((y * &model.theta_true - direct).norm());
    }
    worst
}

/// Counts states where `M` is not symmetric positive definite or exceeds
/// `k_M`.
pub fn inertia_violations(model: &ModelSpec, draws: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..draws)
        .filter(|_| {
            let m = model.mass_matrix(&random_vec(&mut rng, model.dim(), 10.0)).unwrap();
            let sym = (&m - m.transpose()).amax() <= 1e-12 * m.amax();
            let eig = m.clone().symmetric_eigen().eigenvalues;
            !(sym && eig.min() > 0.0 && eig.max() <= model.k_m * (1.0 + 1e-12))
        })
        .count()
}

/// Counts states where `‖C(q, q̇)‖₂ > k_C ‖q̇‖`, sampling speeds in
/// `[min_speed, 5]`.
pub fn coriolis_violations(model: &ModelSpec, draws: usize, seed: u64, min_speed: f64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.dim();
    (0..draws)
        .filter(|_| {
            let q = random_vec(&mut rng, n, 10.0);
            let dir = random_vec(&mut rng, n, 1.0).normalize();
            let qd = dir * rng.gen_range(min_speed..5.0);
            let c = model.coriolis_matrix(&q, &qd).unwrap();
            c.singular_values().max() > model.k_c * qd.norm()
        })
        .count()
}

/// Largest `|xᵀ(Ṁ − 2C)x − expected| / ‖x‖²` with `Ṁ` from central
/// differences along `q + t q̇`.
pub fn skew_residual(model: &ModelSpec, expected: impl Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> f64, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.dim();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let q = random_vec(&mut rng, n, 5.0);
        let qd = random_vec(&mut rng, n, 2.0);
        let x = random_vec(&mut rng, n, 2.0);
        let m_dot = (model.mass_matrix(&(&q + &qd * h)).unwrap() - model.mass_matrix(&(&q - &qd * h)).unwrap()) / (2.0 * h);
        let c = model.coriolis_matrix(&q, &qd).unwrap();
        let val = (x.transpose() * (m_dot - c * 2.0) * &x)[0];
        worst = worst.max((val - expected(&q, &qd, &x)).abs() / x.norm_squared());
    }
    worst
}

/// The ship without hydrodynamic damping.
pub fn undamped_ship(frac: f64) -> ModelSpec {
    let mut ship = ShipBodyParams::reference();
    ship.damping = Matrix3::zeros();
    ModelSpec::surface_ship(ship, frac)
}

/// Runs every check.
pub fn verify(opts: &VerifyOptions) -> Report {
    let draws = opts.draws.unwrap_or(1000);
    let mut r = Report::default();
    let di = ModelSpec::double_integrator(0.1);
    let ss = ModelSpec::surface_ship(ShipBodyParams::reference(), 0.1);

    for (label, m) in [("di", &di), ("ss", &ss)] {
        let res = regressor_residual(m, draws, 1);
        r.push(&format!("regressor identity ({label})"), res <= 1e-9, format!("max residual {res:.3e} over {draws} draws"));
        let bad = inertia_violations(m, draws, 2);
        r.push(&format!("inertia bound ({label})"), bad == 0, format!("{bad} of {draws} states violate SPD or k_M = {:.4}", m.k_m));
    }
    let bad = coriolis_violations(&di, draws, 3, 1e-3);
    r.push("coriolis bound (di)", bad == 0, format!("{bad} of {draws} states exceed k_C"));
    let bad = coriolis_violations(&ss, draws, 3, 0.1);
    r.push("coriolis bound (ss, |qdot| >= 0.1)", bad == 0, format!("{bad} of {draws} states exceed k_C"));

    let res = skew_residual(&di, |_, qd, x| -0.2 * qd.norm() * x.norm_squared(), draws, 4);
    r.push("dissipation identity (di)", res <= 1e-6, format!("max residual {res:.3e}"));
    let res = skew_residual(&undamped_ship(0.1), |_, _, _| 0.0, draws, 5);
    r.push("skew symmetry (undamped ss)", res <= 1e-6, format!("max residual {res:.3e}"));
    let damping = ShipBodyParams::reference().damping;
    let res = skew_residual(
        &ss,
        |q, _, x| {
            let w = body_to_earth(q[2]).transpose() * nalgebra::Vector3::new(x[0], x[1], x[2]);
            -2.0 * (w.transpose() * damping * w)[0]
        },
        draws,
        6,
    );
    r.push("damping contribution (ss)", res <= 1e-6, format!("max residual {res:.3e}"));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let worst = (0..draws)
        .map(|_| {
            let j = body_to_earth(rng.gen_range(-10.0..10.0));
            (j.transpose() * j - Matrix3::identity()).amax()
        })
        .fold(0.0, f64::max);
    r.push("rotation orthogonality", worst <= 1e-12, format!("max |JᵀJ − I| {worst:.3e}"));

    let mut k: DMatrix<f64> = SpringMatrix::hexagon().matrix().clone();
    if opts.inject_asymmetric_k {
        k[(0, 1)] += 0.01;
    }
    match SpringMatrix::new(k) {
        Ok(_) => r.push("spring matrix invariants", true, "symmetric, zero diagonal, connected".into()),
        Err(e) => r.push("spring matrix invariants", false, e.to_string()),
    }

    for name in PRESETS {
        let cfg = preset(name).expect("shipped preset");
        match run(&cfg) {
            Ok(s) => {
                let s = s.summary;
                let ok = s.post_reset_violations == 0
                    && s.gap_violations == 0
                    && s.sync_mismatches == 0
                    && s.reset_error_nonzero == 0
                    && s.identity_residual_g <= 1e-10
                    && s.identity_residual_s <= 1e-10
                    && s.bound_holds;
                r.push(
                    &format!("run invariants ({name})"),
                    ok,
                    format!(
                        "post-reset {} gaps {} sync {} reset {} g {:.1e} s {:.1e} bound {:.3e} <= xi {:.3e}",
                        s.post_reset_violations,
                        s.gap_violations,
                        s.sync_mismatches,
                        s.reset_error_nonzero,
                        s.identity_residual_g,
                        s.identity_residual_s,
                        s.bound_lhs,
                        s.xi
                    ),
                );
            }
            Err(e) => r.push(&format!("run invariants ({name})"), false, e.to_string()),
        }
    }

    let mut cfg = preset("formation-di").expect("shipped preset");
    cfg.gains.ks = Some(4.0);
    cfg.gains.k0 = 2.0;
    cfg.gains.d_max = 6.0;
    cfg.gains.eta = 5.0;
    match run(&cfg) {
        Ok(s) => {
            let s = s.summary;
            r.push(
                "formation bound with finite xi",
                s.c3 > 0.0 && s.bound_holds,
                format!("c3 {:.3} bound {:.4e} <= xi {:.4e}", s.c3, s.bound_lhs, s.xi),
            );
        }
        Err(e) => r.push("formation bound with finite xi", false, e.to_string()),
    }
    r
}
