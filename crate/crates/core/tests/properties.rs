use etfc::cli::{parse_config, preset, to_toml};
use etfc::formation::{g_term, potential_energy, FormationSpec, Gains, SpringMatrix};
use etfc::models::{body_to_earth, sample_perturbation, ModelSpec, ShipBodyParams};
use etfc::network::residual_comm_ratio;
use etfc::simulation::Scenario;
use etfc::triggering::{ctc_primary, ctc_velocity, TriggerConstants, TriggerInputs};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vec_of(n: usize, scale: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-scale..scale, n).prop_map(DVector::from_vec)
}

fn config(n: usize) -> impl Strategy<Value = Vec<DVector<f64>>> {
    prop::collection::vec(vec_of(2, 10.0), n)
}

fn di_spec() -> FormationSpec {
    Scenario::build(&preset("formation-di").unwrap()).unwrap().spec
}

proptest! {
    #[test]
    fn regressor_matches_direct_dynamics(q in vec_of(3, 10.0), qd in vec_of(3, 5.0), x1 in vec_of(3, 5.0), x2 in vec_of(3, 5.0)) {
        let ss = ModelSpec::surface_ship(ShipBodyParams::reference(), 0.1);
        let direct = ss.mass_matrix(&q).unwrap() * &x1 + ss.coriolis_matrix(&q, &qd).unwrap() * &x2;
        let y = ss.regressor(&q, &qd, &x1, &x2).unwrap();
        prop_assert!((y * &ss.theta_true - &direct).norm() <= 1e-9 * (1.0 + direct.norm()));

        let di = ModelSpec::double_integrator(0.1);
        let (q, qd, x1, x2) = (q.rows(0, 2).into_owned(), qd.rows(0, 2).into_owned(), x1.rows(0, 2).into_owned(), x2.rows(0, 2).into_owned());
        let expect = &x1 + &x2 * (0.1 * qd.norm());
        let y = di.regressor(&q, &qd, &x1, &x2).unwrap();
        prop_assert!((y * &di.theta_true - expect).norm() <= 1e-12);
    }

    #[test]
    fn ship_inertia_is_rotated_body_inertia(psi in -10.0f64..10.0, x in -50.0f64..50.0, y in -50.0f64..50.0) {
        let mb = ShipBodyParams::reference().mass;
        let (c, s) = (psi.cos(), psi.sin());
        let j = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let expect = j * mb * j.transpose();
        let m = ModelSpec::surface_ship(ShipBodyParams::reference(), 0.1).mass_matrix(&DVector::from_vec(vec![x, y, psi])).unwrap();
        for r in 0..3 {
            for k in 0..3 {
                prop_assert!((m[(r, k)] - expect[(r, k)]).abs() <= 1e-12 * mb.amax());
            }
        }
        let jb = body_to_earth(psi);
        prop_assert!((jb * Vector3::new(1.0, 0.0, 0.0) - Vector3::new(c, s, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn energy_is_translation_invariant_and_nonnegative(q in config(6), shift in vec_of(2, 100.0)) {
        let spec = di_spec();
        let p = potential_energy(&q, &spec).unwrap();
        let moved: Vec<_> = q.iter().map(|x| x + &shift).collect();
        let pm = potential_energy(&moved, &spec).unwrap();
        prop_assert!(p >= 0.0);
        prop_assert!((p - pm).abs() <= 1e-9 * (1.0 + p));
    }

    #[test]
    fn energy_vanishes_only_on_the_target_shape(anchor in vec_of(2, 10.0), bump in vec_of(2, 1.0), who in 0usize..6) {
        let spec = di_spec();
        let mut q: Vec<_> = spec.offsets.iter().map(|o| o + &anchor).collect();
        prop_assert!(potential_energy(&q, &spec).unwrap() <= 1e-20);
        prop_assume!(bump.norm() > 1e-3);
        q[who] += &bump;
        prop_assert!(potential_energy(&q, &spec).unwrap() > 0.0);
    }

    #[test]
    fn coupling_term_is_half_energy_gradient(q in config(6)) {
        let spec = di_spec();
        let zero = DVector::zeros(2);
        let h = 1e-6;
        let mut total = DVector::zeros(2);
        for i in 0..6 {
            let others: Vec<(usize, &DVector<f64>)> = q.iter().enumerate().collect();
            let g = g_term(i, &q[i], &others, &spec, &zero).unwrap();
            total += &g;
            for c in 0..2 {
                let mut up = q.clone();
                let mut dn = q.clone();
                up[i][c] += h;
                dn[i][c] -= h;
                let grad = (potential_energy(&up, &spec).unwrap() - potential_energy(&dn, &spec).unwrap()) / (2.0 * h);
                prop_assert!((grad - 2.0 * g[c]).abs() <= 1e-5 * (1.0 + grad.abs()));
            }
        }
        prop_assert!(total.amax() <= 1e-9);
    }

    #[test]
    fn coupling_term_ignores_non_neighbors(q in config(6), junk in vec_of(2, 100.0), i in 0usize..6) {
        let spec = di_spec();
        let zero = DVector::zeros(2);
        let all: Vec<(usize, &DVector<f64>)> = q.iter().enumerate().collect();
        let base = g_term(i, &q[i], &all, &spec, &zero).unwrap();
        let far = (i + 2) % 6;
        let mut rev: Vec<(usize, &DVector<f64>)> = all.iter().rev().copied().filter(|(j, _)| *j != far).collect();
        rev.push((far, &junk));
        prop_assert_eq!(g_term(i, &q[i], &rev, &spec, &zero).unwrap(), base);
    }

    #[test]
    fn primary_rhs_grows_with_estimation_error(e in vec_of(2, 1.0), scale in 1.0f64..10.0, sbar in vec_of(2, 5.0), qdot in vec_of(2, 5.0)) {
        let sc = Scenario::build(&preset("formation-di").unwrap()).unwrap();
        let zero = DVector::zeros(2);
        let nb = [(0.185, &qdot)];
        let y = DMatrix::from_element(2, 2, 0.3);
        let dtheta = DVector::from_element(2, 0.05);
        let inputs = |e: &DVector<f64>| {
            let inp = TriggerInputs { sbar: &sbar, gbar: &sbar, e, edot: &zero, qdot: &qdot, qdot_star: &zero, neighbor_qhat_dot: &nb, y: &y, delta_theta_max: &dtheta };
            ctc_primary(&inp, &sc.triggers)
        };
        let small = inputs(&e);
        let big = inputs(&(&e * scale));
        prop_assert!(big.rhs >= small.rhs);
        prop_assert_eq!(big.lhs, small.lhs);
        let tc: &TriggerConstants = &sc.triggers;
        prop_assert!(small.lhs >= tc.eta);
    }

    #[test]
    fn velocity_condition_threshold(v in vec_of(3, 5.0), vhat in vec_of(3, 5.0), eta2 in 0.01f64..10.0) {
        prop_assert_eq!(ctc_velocity(&v, &vhat, eta2), v.norm() >= vhat.norm() + eta2);
        prop_assert!(!ctc_velocity(&v, &v, eta2));
    }

    #[test]
    fn perturbations_respect_bound(seed in any::<u64>(), d_max in 0.0f64..50.0, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = sample_perturbation(&mut rng, d_max, n).unwrap();
        prop_assert_eq!(d.len(), n);
        prop_assert!(d.iter().all(|x| x.abs() <= d_max));
    }

    #[test]
    fn comm_ratio_in_percent_range(agents in 1usize..10, steps in 1usize..500, frac in 0.0f64..=1.0) {
        let n_m = (frac * (agents * steps) as f64).floor() as usize;
        let r = residual_comm_ratio(n_m, agents, steps as f64 * 0.01, 0.01);
        prop_assert!((0.0..=100.0).contains(&r));
    }

    #[test]
    fn gain_constraints_reject_bad_values(ks_short in 1e-3f64..2.0, b_over in 0.0f64..1.0) {
        let base = Scenario::build(&preset("formation-di").unwrap()).unwrap().spec.gains;
        let k_m = 1.0;
        prop_assert!(base.validate(k_m, 2).is_ok());
        let mut g: Gains = base.clone();
        g.ks = Gains::ks_threshold(g.kp, k_m) - ks_short;
        prop_assert!(g.validate(k_m, 2).is_err());
        let mut g = base.clone();
        g.b = g.b_limit() * (1.0 + b_over);
        prop_assert!(g.validate(k_m, 2).is_err());
        let mut g = base;
        g.gamma = DMatrix::identity(3, 3);
        prop_assert!(g.validate(k_m, 2).is_err());
    }

    #[test]
    fn asymmetric_springs_are_rejected(i in 0usize..6, j in 0usize..6, delta in 1e-6f64..1.0) {
        prop_assume!(i != j);
        let mut k = SpringMatrix::hexagon().matrix().clone();
        k[(i, j)] += delta;
        prop_assert!(SpringMatrix::new(k).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scenario_toml_round_trips(
        name in prop::sample::select(vec!["formation-di", "tracking-di", "formation-ss", "tracking-ss"]),
        seed in 0..=i64::MAX as u64,
        eta in 0.0f64..20.0,
        d_max in 0.0f64..20.0,
    ) {
        let mut cfg = preset(name).unwrap();
        cfg.seed = seed;
        cfg.gains.eta = eta;
        cfg.gains.d_max = d_max;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.toml");
        std::fs::write(&path, to_toml(&cfg).unwrap()).unwrap();
        prop_assert_eq!(parse_config(&path).unwrap(), cfg);
    }
}
