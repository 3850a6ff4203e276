mod common;

use std::collections::BTreeSet;
use std::sync::OnceLock;

use tdmpc::config::RunConfig;
use tdmpc::dynamics::{BicycleParams, CurvatureProfile, ModelSpec};
use tdmpc::experiment::train;
use tdmpc::ilmpc::IlmpcConfig;
use tdmpc::safeset::{SafeSetStore, Trajectory};
use tdmpc::scenarios::{build_robot_task, CorridorSpec, Obstacle};
use tdmpc::task::{BoxSet, TaskSpec};
use tdmpc::tdmpc::{ctrb, decompose, CtrbStatus, DecomposeConfig, DecompositionResult};
use tdmpc::Error;

use common::{assert_integer_cost_to_go, ctrb_agreement, robot_store, robot_task};

const IDENTITY: [usize; 6] = [0, 1, 2, 3, 4, 5];
const HELD_OUT: [usize; 6] = [0, 2, 4, 1, 3, 5];

fn robot_inputs() -> BoxSet {
    robot_task(&IDENTITY).0.input_box
}

#[test]
fn ctrb_fixed_point_on_the_trajectory() {
    let model = ModelSpec::integrator(0.01);
    let x = vec![0.0, 0.0, 0.3, 0.0];
    let r = ctrb(
        &model,
        &x,
        std::slice::from_ref(&x),
        &[3.0],
        &robot_inputs(),
    )
    .unwrap();
    assert_eq!(r.status, CtrbStatus::Feasible);
    assert!(r.input.iter().all(|u| u.abs() < 1e-12));
    assert_eq!(r.weights, vec![1.0]);
    assert_eq!(r.q_star, 3.0);
    assert_eq!(r.objective(1.0), 4.0);
}

#[test]
fn ctrb_beyond_input_bound_is_infeasible() {
    let model = ModelSpec::integrator(0.01);
    let x = vec![0.0, 0.0, 0.3, 0.0];
    // dq0 = 0.1 after one step needs an acceleration of 10 > pi
    let z = vec![vec![0.0, 0.1, 0.3, 0.0]];
    let r = ctrb(&model, &x, &z, &[3.0], &robot_inputs()).unwrap();
    assert_eq!(r.status, CtrbStatus::Infeasible);
    assert!(!r.is_feasible());
}

#[test]
fn ctrb_rejects_mismatched_dimensions() {
    let model = ModelSpec::integrator(0.01);
    let x = vec![0.0; 4];
    assert!(matches!(
        ctrb(&model, &x, &[vec![0.0; 4]], &[1.0, 2.0], &robot_inputs()),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        ctrb(&model, &x, &[], &[], &robot_inputs()),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        ctrb(&model, &x, &[vec![0.0; 3]], &[1.0], &robot_inputs()),
        Err(Error::Contract(_))
    ));
}

#[test]
fn ctrb_picks_the_cheapest_reachable_mix() {
    let model = ModelSpec::integrator(0.01);
    let x = vec![1.0, 1.0, 0.3, 0.0];
    let y = model.step(&x, &[0.0, 0.0]).unwrap();
    let mut far = y.clone();
    far[0] += 1.0;
    let mut cheap = y.clone();
    cheap[1] += 0.02;
    let r = ctrb(
        &model,
        &x,
        &[y.clone(), far, cheap.clone()],
        &[10.0, 1.0, 5.0],
        &robot_inputs(),
    )
    .unwrap();
    assert!(r.is_feasible());
    // q0 cannot be steered in one step, so the far point gets no weight
    assert!((r.weights[2] - 1.0).abs() < 1e-9);
    assert!((r.q_star - 5.0).abs() < 1e-9);
    assert!((r.input[0] - 2.0).abs() < 1e-7);
}

#[test]
fn ctrb_agrees_with_input_grid_oracle() {
    let a = ctrb_agreement(60, 5);
    assert!(a.feasible > 10 && a.feasible < 55, "{a:?}");
    assert_eq!(a.unexplained, 0, "{a:?}");
    assert_eq!(a.gap_violations, 0, "{a:?}");
    // the gap bound must be exercised, not skipped as sub-grid
    assert!(a.sub_grid * 2 < a.feasible, "{a:?}");
}

#[test]
fn ctrb_certifies_the_bicycle_linearization() {
    let model = ModelSpec::bicycle(
        0.1,
        BicycleParams::default(),
        CurvatureProfile::constant(1.5),
    );
    let inputs = BoxSet::new(vec![-1.0, -0.5], vec![1.0, 0.5]).unwrap();
    let x = vec![1.2, 0.02, 0.5, 0.05, 2.0, 0.1];
    let y0 = model.step(&x, &[0.3, 0.1]).unwrap();
    // cross-polytope around a reachable successor
    let mut z = Vec::new();
    for i in 0..6 {
        for sign in [-1.0, 1.0] {
            let mut s = y0.clone();
            s[i] += sign * 0.01;
            z.push(s);
        }
    }
    let q: Vec<f64> = (0..12).map(|t| 10.0 + t as f64).collect();
    let r = ctrb(&model, &x, &z, &q, &inputs).unwrap();
    assert!(r.is_feasible());
    let y = model.step(&x, &r.input).unwrap();
    let hull: Vec<f64> = (0..6)
        .map(|i| z.iter().zip(&r.weights).map(|(s, w)| w * s[i]).sum())
        .collect();
    let scale = hull.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let gap = y
        .iter()
        .zip(&hull)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(gap <= 1e-3 * scale);
    assert!(r.residual <= 1e-3 * scale);
    assert!(r.q_star >= 10.0 && r.q_star <= 21.0);
}

/// Identity-order store: baseline plus two iterations.
fn identity_store() -> &'static (TaskSpec, ModelSpec, SafeSetStore) {
    static STORE: OnceLock<(TaskSpec, ModelSpec, SafeSetStore)> = OnceLock::new();
    STORE.get_or_init(|| robot_store(&IDENTITY, 2, &IlmpcConfig::default()))
}

#[test]
fn identity_order_keeps_everything() {
    let (task, model, store) = identity_store();
    let r = decompose(store, task, model, &DecomposeConfig::default()).unwrap();
    assert!(r.pruned.is_empty(), "{}", r.report());
    assert!(!r.is_empty());
    for p in 0..task.len() {
        assert_eq!(r.survivors_at(p), store.len());
    }
    let baseline = &store.executions[0].trajectory;
    for x in &baseline.states {
        assert!(r.contains_state(x), "baseline state {x:?} lost");
    }
    // the trajectory starting from the baseline's first segment replays it
    let first = r
        .store
        .executions
        .iter()
        .find(|e| {
            e.origin
                .as_ref()
                .is_some_and(|o| o.position == 0 && o.source == 0)
        })
        .unwrap();
    let body = baseline.segments[0].len();
    assert_eq!(first.trajectory.states[..body], baseline.states[..body]);
    assert!(r.report().contains("prunes: 0"));
}

#[test]
fn decomposition_is_deterministic_and_parallel_safe() {
    let (task, model, store) = identity_store();
    let (task2, _) = robot_task(&HELD_OUT);
    for t in [task, &task2] {
        let a = decompose(store, t, model, &DecomposeConfig::default()).unwrap();
        let b = decompose(
            store,
            t,
            model,
            &DecomposeConfig {
                parallel: false,
                ..DecomposeConfig::default()
            },
        )
        .unwrap();
        assert_eq!(a.store, b.store);
        assert_eq!(a.link_costs, b.link_costs);
        assert_eq!(a.report(), b.report());
    }
}

/// Height windows that only overlap in the recorded order.
fn ramp_corridor() -> CorridorSpec {
    let ob = |h_min, h_max| Obstacle {
        span: 0.3,
        h_min,
        h_max,
    };
    CorridorSpec {
        obstacles: vec![ob(0.1, 0.35), ob(0.25, 0.45), ob(0.35, 0.55)],
        dt: 0.01,
    }
}

/// Constant joint speed with the height climbing steadily through all three windows.
fn ramp(task: &TaskSpec, model: &ModelSpec) -> Trajectory {
    let mut x = vec![0.0, 1.0, 0.27, 0.2 / 0.9];
    let mut states = vec![x.clone()];
    while !task.target_reached(&x) {
        x = model.step(&x, &[0.0, 0.0]).unwrap();
        states.push(x.clone());
    }
    let inputs = vec![vec![0.0, 0.0]; states.len()];
    Trajectory::from_rollout(task, states, inputs)
}

pub fn gap_store() -> SafeSetStore {
    let spec = ramp_corridor();
    let (task, model) = build_robot_task(&spec, &[0, 1, 2]).unwrap();
    let mut store = SafeSetStore::new();
    store
        .record_execution(&model, &task, ramp(&task, &model))
        .unwrap();
    store
}

#[test]
fn unreachable_gap_empties_the_result() {
    let store = gap_store();
    let (task, model) = build_robot_task(&ramp_corridor(), &[2, 1, 0]).unwrap();
    let r = decompose(&store, &task, &model, &DecomposeConfig::default()).unwrap();
    assert!(r.is_empty());
    assert_eq!(r.survivors_at(2), 1);
    assert_eq!(r.survivors_at(1), 0);
    assert!(r.pruned.iter().any(|p| p.position == 1));
    assert!(r.report().contains("result: empty"));
    // the recorded order itself transfers intact
    let (same, _) = build_robot_task(&ramp_corridor(), &[0, 1, 2]).unwrap();
    assert!(
        !decompose(&store, &same, &model, &DecomposeConfig::default())
            .unwrap()
            .is_empty()
    );
}

#[test]
fn empty_store_is_a_contract_error() {
    let (task, model) = robot_task(&IDENTITY);
    assert!(matches!(
        decompose(
            &SafeSetStore::new(),
            &task,
            &model,
            &DecomposeConfig::default()
        ),
        Err(Error::Contract(_))
    ));
}

fn small_training() -> &'static SafeSetStore {
    static STORE: OnceLock<SafeSetStore> = OnceLock::new();
    STORE.get_or_init(|| {
        let mut cfg = RunConfig::robot_default();
        cfg.training.iterations = 2;
        train(&cfg).unwrap().merged
    })
}

fn held_out() -> (TaskSpec, ModelSpec, DecompositionResult) {
    let (task, model) = robot_task(&HELD_OUT);
    let r = decompose(small_training(), &task, &model, &DecomposeConfig::default()).unwrap();
    (task, model, r)
}

#[test]
fn held_out_chains_replay_open_loop() {
    let (task, model, r) = held_out();
    assert!(!r.is_empty(), "{}", r.report());
    let x0 = CorridorSpec::default().initial_state(&HELD_OUT);
    assert!(r.contains_state(&x0));
    for e in &r.store.executions {
        let t = &e.trajectory;
        let mut x = t.states[0].clone();
        for k in 0..t.len() - 1 {
            x = model.step(&x, &t.inputs[k]).unwrap();
            let dev = x
                .iter()
                .zip(&t.states[k + 1])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(
                dev <= 1e-9,
                "execution {} deviates by {dev} at {k}",
                e.iteration
            );
            assert!(task.violation(&x) <= 1e-6);
            let p = task.position_of(&t.states[k]);
            assert!(task.subtasks[p].inputs.violation(&t.inputs[k]) <= 1e-12);
        }
        assert!(task.target_reached(&x));
    }
    assert_integer_cost_to_go(&r.store);
}

#[test]
fn held_out_links_are_certified_and_costed() {
    let (task, model, r) = held_out();
    assert_eq!(
        r.relinks.len() + r.pruned.len(),
        r.offered[..task.len() - 1].iter().sum::<usize>()
    );
    for l in &r.relinks {
        let e = &r.store.executions[l.trajectory];
        let guard = &e.trajectory.states[l.guard_index];
        assert_eq!(e.trajectory.inputs[l.guard_index], l.input);
        // hull certificate against the target trajectory
        let z = &r.store.executions[l.target].trajectory.states;
        let y = model.step(guard, &l.input).unwrap();
        let hull: Vec<f64> = (0..4)
            .map(|i| l.weights.iter().map(|(t, w)| w * z[*t][i]).sum())
            .collect();
        let gap = y
            .iter()
            .zip(&hull)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap <= 1e-6, "hull gap {gap}");
        let total: f64 = l.weights.iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-9);
        let q: f64 = l
            .weights
            .iter()
            .map(|(t, w)| w * r.store.executions[l.target].cost_to_go[*t])
            .sum();
        assert!((q - l.q_star).abs() < 1e-6);
        // link cost at the guard, then the backward recursion upstream
        let c = &r.link_costs[l.trajectory];
        assert_eq!(c.len(), l.guard_index + 1);
        assert_eq!(
            c[l.guard_index],
            task.stage_cost(guard, &l.input) + l.q_star
        );
        for k in 0..l.guard_index {
            let h = task.stage_cost(&e.trajectory.states[k], &e.trajectory.inputs[k]);
            assert_eq!(c[k], c[k + 1] + h);
        }
        assert_eq!(e.origin.as_ref().unwrap().relinked_to[0], l.target);
    }
}

#[test]
fn pruned_guards_have_no_usable_link() {
    let (task, model, r) = held_out();
    let training = small_training();
    for pr in &r.pruned {
        if pr.position + 1 == task.len() {
            continue;
        }
        let src = &training.executions[pr.source].trajectory;
        let seg = src
            .segments
            .iter()
            .find(|s| s.subtask == pr.subtask)
            .unwrap();
        if seg.last + 1 == src.len() {
            continue;
        }
        let mut guard = src.states[seg.last].clone();
        guard[0] += task.start_of(pr.position) - seg.start_progress;
        let inputs = &task.subtasks[pr.position].inputs;
        for (i, d) in r.store.executions.iter().enumerate() {
            let o = d.origin.as_ref().unwrap();
            if o.position != pr.position + 1 {
                continue;
            }
            let body: Vec<_> = d
                .trajectory
                .states
                .iter()
                .take_while(|s| task.position_of(s) == o.position)
                .cloned()
                .collect();
            let res = ctrb(&model, &guard, &body, &d.cost_to_go[..body.len()], inputs).unwrap();
            assert!(
                !res.is_feasible() || pr.reason.contains("replay"),
                "prune of {pr:?} missed a link to {i}"
            );
        }
    }
}

fn survivors(r: &DecompositionResult) -> BTreeSet<(usize, usize)> {
    r.store
        .executions
        .iter()
        .map(|e| e.origin.as_ref().map(|o| (o.source, o.position)).unwrap())
        .collect()
}

#[test]
fn more_executions_never_shrink_coverage() {
    let (task, model) = robot_task(&HELD_OUT);
    let full = small_training();
    let mut prev = BTreeSet::new();
    for n in [3, 6, 9, full.len()] {
        let part = SafeSetStore {
            kind: full.kind,
            executions: full.executions[..n].to_vec(),
        };
        let r = decompose(&part, &task, &model, &DecomposeConfig::default()).unwrap();
        let s = survivors(&r);
        assert!(prev.is_subset(&s), "coverage shrank at {n} executions");
        prev = s;
    }
}
