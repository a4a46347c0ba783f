//! Continuous-communication run against an independent integration of the
//! ideal double-integrator closed loop.

use etfc::cli::preset;
use etfc::estimators::EstimatorKind;
use etfc::simulation::run;

type State = Vec<[f64; 4]>;

/// `q̈ = −k_s s − k_g g − k_p ġ − 0.1‖q̇‖ s` with `s = q̇ + k_p g`.
fn ideal_rate(x: &State, k: &[Vec<f64>], off: &[Vec<f64>], kp: f64, kg: f64, ks: f64) -> State {
    let n = x.len();
    (0..n)
        .map(|i| {
            let mut g = [0.0; 2];
            let mut gd = [0.0; 2];
            for j in 0..n {
                for c in 0..2 {
                    g[c] += k[i][j] * (x[i][c] - x[j][c] - (off[i][c] - off[j][c]));
                    gd[c] += k[i][j] * (x[i][2 + c] - x[j][2 + c]);
                }
            }
            let speed = x[i][2].hypot(x[i][3]);
            let mut out = [x[i][2], x[i][3], 0.0, 0.0];
            for c in 0..2 {
                let s = x[i][2 + c] + kp * g[c];
                out[2 + c] = -ks * s - kg * g[c] - kp * gd[c] - 0.1 * speed * s;
            }
            out
        })
        .collect()
}

fn axpy(x: &State, h: f64, d: &State) -> State {
    x.iter().zip(d).map(|(a, b)| std::array::from_fn(|c| a[c] + h * b[c])).collect()
}

fn energy(x: &State, k: &[Vec<f64>], off: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let mut p = 0.0;
    for i in 0..n {
        for j in 0..n {
            for c in 0..2 {
                p += k[i][j] * (x[i][c] - x[j][c] - (off[i][c] - off[j][c])).powi(2);
            }
        }
    }
    0.5 * p
}

#[test]
fn permanent_communication_matches_ideal_loop() {
    let mut cfg = preset("formation-di").unwrap();
    cfg.permanent_comm = true;
    cfg.estimator = EstimatorKind::Accurate;
    cfg.gains.gamma = 1e-9;
    let sim = run(&cfg).unwrap();
    let (kp, kg, ks) = (cfg.gains.kp, cfg.gains.kg, sim.summary.ks);

    let mut x: State = cfg.q0.iter().zip(&cfg.qdot0).map(|(q, v)| [q[0], q[1], v[0], v[1]]).collect();
    let h = 1e-4;
    let per_sample = (cfg.gains.dt / h).round() as usize;
    let f = |x: &State| ideal_rate(x, &cfg.spring, &cfg.offsets, kp, kg, ks);
    let mut worst_p = 0.0f64;
    let mut worst_q = 0.0f64;
    for k in 0..sim.t.len() {
        let p = energy(&x, &cfg.spring, &cfg.offsets);
        worst_p = worst_p.max((sim.p[k] - p).abs() / p.max(1e-3));
        for (i, q) in sim.positions[k].iter().enumerate() {
            worst_q = worst_q.max((q[0] - x[i][0]).abs().max((q[1] - x[i][1]).abs()));
        }
        for _ in 0..per_sample {
            let k1 = f(&x);
            let k2 = f(&axpy(&x, h / 2.0, &k1));
            let k3 = f(&axpy(&x, h / 2.0, &k2));
            let k4 = f(&axpy(&x, h, &k3));
            x = x
                .iter()
                .enumerate()
                .map(|(i, a)| std::array::from_fn(|c| a[c] + h / 6.0 * (k1[i][c] + 2.0 * k2[i][c] + 2.0 * k3[i][c] + k4[i][c])))
                .collect();
        }
    }
    assert!(worst_p < 0.02, "relative energy gap {worst_p:.3e}");
    assert!(worst_q < 5e-3, "position gap {worst_q:.3e}");
}
