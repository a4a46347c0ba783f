use etfc::cli::preset;
use etfc::estimators::{estimation_error, estimator_rate, reset_on_message, zoh_estimate, EstimatorKind, EstimatorSlot};
use etfc::formation::SpringMatrix;
use etfc::models::AgentState;
use etfc::network::{broadcast, Message, Topology};
use etfc::simulation::{Scenario, World};
use etfc::Error;
use nalgebra::DVector;

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(xs)
}

fn msg(sender: usize, t: f64) -> Message {
    Message { sender, t, q: v(&[1.0, -2.0]), qdot: v(&[0.5, 0.25]), theta_bar: v(&[1.0, 0.1]) }
}

#[test]
fn reset_copies_payload_and_zeroes_error() {
    let mut slot = EstimatorSlot::empty(1, 0, 2, 2, EstimatorKind::Accurate);
    assert!(!slot.has_message());
    reset_on_message(&mut slot, &msg(0, 0.3)).unwrap();
    assert!(slot.has_message());
    assert_eq!(slot.last_reset, 0.3);
    let actual = AgentState { q: v(&[1.0, -2.0]), qdot: v(&[0.5, 0.25]) };
    let (e, ed) = estimation_error(&slot, &actual);
    assert_eq!(e, DVector::zeros(2));
    assert_eq!(ed, DVector::zeros(2));
}

#[test]
fn misrouted_and_stale_messages_are_protocol_errors() {
    let mut slot = EstimatorSlot::empty(1, 0, 2, 2, EstimatorKind::Zoh);
    assert!(matches!(reset_on_message(&mut slot, &msg(2, 0.0)), Err(Error::Protocol(_))));
    reset_on_message(&mut slot, &msg(0, 0.5)).unwrap();
    assert!(matches!(reset_on_message(&mut slot, &msg(0, 0.4)), Err(Error::Protocol(_))));
    assert_eq!(slot.last_reset, 0.5);
}

#[test]
fn zoh_slot_holds_its_value() {
    let sc = Scenario::build(&preset("formation-di").unwrap()).unwrap();
    let mut slot = EstimatorSlot::empty(1, 0, 2, 2, EstimatorKind::Zoh);
    reset_on_message(&mut slot, &msg(0, 0.0)).unwrap();
    let r = sc.spec.reference.eval(0.0);
    let rate = estimator_rate(&slot, &sc.model, &r, sc.gains()).unwrap();
    assert_eq!(rate.qhat_ddot, DVector::zeros(2));
    assert_eq!(rate.theta_hat_dot, DVector::zeros(2));
    assert_eq!(zoh_estimate(&slot), (v(&[1.0, -2.0]), v(&[0.5, 0.25])));
}

#[test]
fn broadcast_reaches_neighbors_and_self_only() {
    let topo = Topology::from_spring(&SpringMatrix::hexagon());
    let slots = broadcast(&msg(2, 0.0), &topo).unwrap();
    let mut owners: Vec<usize> = slots.iter().map(|&(o, _)| o).collect();
    owners.sort_unstable();
    assert_eq!(owners, vec![1, 2, 3, 5]);
    assert!(slots.iter().all(|&(_, s)| s == 2));
}

/// Every copy of agent `j`'s estimator agrees bitwise, and a sending agent's
/// copies equal its true state right after delivery.
fn check_world(name: &str, est: EstimatorKind) {
    let mut cfg = preset(name).unwrap();
    cfg.estimator = est;
    cfg.gains.t_final = 0.5;
    let mut w = World::new(Scenario::build(&cfg).unwrap());
    let steps = w.scenario().gains().steps();
    let mut last_send = vec![f64::NEG_INFINITY; w.scenario().agents()];
    for _ in 0..steps {
        let before: Vec<AgentState> = (0..w.scenario().agents()).map(|i| w.agent_state(i)).collect();
        let t = w.time();
        let fired = w.step().unwrap().fired;
        let dt = w.scenario().gains().dt;
        for j in 0..fired.len() {
            let own = w.slot(j, j).unwrap();
            for &i in w.scenario().topo.neighbors(j) {
                let copy = w.slot(i, j).unwrap();
                assert_eq!((&copy.qhat, &copy.qhat_dot, &copy.theta_hat), (&own.qhat, &own.qhat_dot, &own.theta_hat));
                assert_eq!(copy.last_reset, own.last_reset);
            }
            if fired[j] {
                assert!(t - last_send[j] >= dt * (1.0 - 1e-9));
                last_send[j] = t;
                assert_eq!(own.last_reset, t);
                if est == EstimatorKind::Zoh {
                    assert_eq!(own.qhat, before[j].q);
                    assert_eq!(own.qhat_dot, before[j].qdot);
                }
            }
        }
    }
}

#[test]
fn estimators_stay_synchronized() {
    for name in ["formation-di", "tracking-ss"] {
        for est in [EstimatorKind::Zoh, EstimatorKind::Accurate] {
            check_world(name, est);
        }
    }
}
