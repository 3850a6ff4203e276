mod common;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tdmpc::dynamics::ModelSpec;
use tdmpc::ilmpc::{policy, run_iteration, solve_step, Controller, IlmpcConfig, TerminalChoice};
use tdmpc::safeset::SafeSetStore;
use tdmpc::scenarios::{
    build_racing_task, racing_initial_state, run_baseline, BaselinePolicy, TrackSpec,
};
use tdmpc::task::TaskSpec;
use tdmpc::Error;

use common::{assert_integer_cost_to_go, robot_store};

const ORDER: [usize; 6] = [0, 1, 2, 3, 4, 5];

fn cfg(horizon: usize) -> IlmpcConfig {
    IlmpcConfig {
        horizon,
        ..IlmpcConfig::default()
    }
}

fn baseline_only() -> (TaskSpec, ModelSpec, SafeSetStore) {
    robot_store(&ORDER, 0, &cfg(12))
}

#[test]
fn one_step_replay_of_a_stored_transition() {
    let (task, model, store) = baseline_only();
    let c = IlmpcConfig {
        exhaustive: true,
        ..cfg(1)
    };
    let e = &store.executions[0];
    for k in [0, 37, 120] {
        let x = &e.trajectory.states[k];
        let sol = solve_step(&model, &task, &store, &c, x).unwrap();
        assert_eq!(
            sol.terminal,
            TerminalChoice::Stored {
                iteration: 0,
                index: k + 1,
                cost_to_go: e.cost_to_go[k + 1]
            }
        );
        assert_eq!(sol.cost, 1.0 + e.cost_to_go[k + 1]);
        for (a, b) in sol.inputs[0].iter().zip(&e.trajectory.inputs[k]) {
            assert!(
                (a - b).abs() < 1e-8,
                "{:?} vs {:?}",
                sol.inputs[0],
                e.trajectory.inputs[k]
            );
        }
        let u = policy(&model, &task, &store, &c, x).unwrap();
        assert_eq!(u, sol.inputs[0]);
    }
}

#[test]
fn target_state_is_held_at_zero_cost() {
    let (task, model, store) = baseline_only();
    let x = store.executions[0].trajectory.final_state().clone();
    let sol = solve_step(&model, &task, &store, &cfg(12), &x).unwrap();
    assert_eq!(sol.terminal, TerminalChoice::Hold);
    assert_eq!(sol.cost, 0.0);
    let y = model.step(&x, &sol.inputs[0]).unwrap();
    assert!(task.target_reached(&y));
}

#[test]
fn policy_is_deterministic() {
    let (task, model, store) = robot_store(&ORDER, 1, &cfg(12));
    let x = store.executions[0].trajectory.states[10].clone();
    let a = policy(&model, &task, &store, &cfg(12), &x).unwrap();
    let b = policy(&model, &task, &store, &cfg(12), &x).unwrap();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    let seq = IlmpcConfig {
        parallel: false,
        ..cfg(12)
    };
    assert_eq!(
        solve_step(&model, &task, &store, &seq, &x).unwrap(),
        solve_step(&model, &task, &store, &cfg(12), &x).unwrap()
    );
}

#[test]
fn start_in_target_gives_an_empty_run() {
    let (task, model, mut store) = baseline_only();
    let x = store.executions[0].trajectory.final_state().clone();
    let rec = run_iteration(&model, &task, &mut store, &cfg(12), &x).unwrap();
    assert_eq!(rec.trajectory.len(), 1);
    assert_eq!(rec.cost, 0.0);
}

#[test]
fn iterations_never_cost_more_than_the_stored_start() {
    let (task, model, mut store) = baseline_only();
    let x0 = store.executions[0].trajectory.states[0].clone();
    let mut last = store.executions[0].cost();
    for _ in 0..4 {
        let rec = run_iteration(&model, &task, &mut store, &cfg(12), &x0).unwrap();
        assert!(rec.cost <= last, "{} after {}", rec.cost, last);
        assert!(rec.trajectory.max_violation(&task) <= 1e-9);
        last = rec.cost;
    }
    assert!(last < store.executions[0].cost());
    assert_integer_cost_to_go(&store);
}

#[test]
fn plan_never_costs_more_than_following_the_store() {
    let (task, model, store) = robot_store(&ORDER, 1, &cfg(12));
    let c = cfg(12);
    let mut ctrl = Controller::new(&model, &task, &store, &c).unwrap();
    for e in &store.executions {
        for k in (0..e.trajectory.len()).step_by(23) {
            ctrl.reset();
            let sol = ctrl.solve(&e.trajectory.states[k]).unwrap();
            assert!(
                sol.cost <= e.cost_to_go[k],
                "cost {} above stored {}",
                sol.cost,
                e.cost_to_go[k]
            );
        }
    }
}

#[test]
fn predicted_plan_is_consistent() {
    let (task, model, store) = robot_store(&ORDER, 1, &cfg(12));
    let x = store.executions[1].trajectory.states[30].clone();
    let sol = solve_step(&model, &task, &store, &cfg(12), &x).unwrap();
    assert_eq!(sol.states[0], x);
    assert_eq!(sol.states.len(), sol.inputs.len() + 1);
    for t in 0..sol.inputs.len() {
        let y = model.step(&sol.states[t], &sol.inputs[t]).unwrap();
        for (a, b) in y.iter().zip(&sol.states[t + 1]) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(
            task.subtasks[task.position_of(&sol.states[t])]
                .inputs
                .violation(&sol.inputs[t])
                <= 1e-9
        );
        assert!(task.violation(&sol.states[t + 1]) <= 1e-7);
    }
    if let TerminalChoice::Stored {
        iteration, index, ..
    } = sol.terminal
    {
        let z = &store.executions[iteration].trajectory.states[index];
        let end = sol.states.last().unwrap();
        assert!(z.iter().zip(end).all(|(a, b)| (a - b).abs() < 1e-7));
    }
}

#[test]
fn invalid_config_is_rejected() {
    let (task, model, store) = baseline_only();
    for bad in [
        cfg(0),
        IlmpcConfig {
            max_steps: 0,
            ..cfg(3)
        },
        IlmpcConfig {
            candidates: 0,
            ..cfg(3)
        },
    ] {
        assert!(matches!(
            Controller::new(&model, &task, &store, &bad),
            Err(Error::Config(_))
        ));
    }
}

#[test]
fn exceeding_max_steps_returns_the_partial_run() {
    let (task, model, mut store) = baseline_only();
    let x0 = store.executions[0].trajectory.states[0].clone();
    let c = IlmpcConfig {
        max_steps: 5,
        ..cfg(12)
    };
    match run_iteration(&model, &task, &mut store, &c, &x0) {
        Err(Error::IterationFailure { trajectory, .. }) => assert_eq!(trajectory.len(), 6),
        other => panic!("expected an iteration failure, got {other:?}"),
    }
    assert_eq!(store.len(), 1);
}

#[test]
fn racing_iteration_improves_on_the_baseline() {
    let track = TrackSpec::default();
    let order: Vec<usize> = (0..10).collect();
    let (task, model) = build_racing_task(&track, &order).unwrap();
    let x0 = racing_initial_state();
    let base = run_baseline(&BaselinePolicy::racing_default(&track), &task, &model, &x0).unwrap();
    let mut store = SafeSetStore::new();
    store
        .record_labeled(&model, &task, base, "baseline")
        .unwrap();
    let c = IlmpcConfig {
        horizon: 8,
        max_steps: 600,
        ..IlmpcConfig::default()
    };
    let rec = run_iteration(&model, &task, &mut store, &c, &x0).unwrap();
    assert!(rec.cost <= store.executions[0].cost());
    assert!(rec.trajectory.max_violation(&task) <= 1e-6);
    assert!(task.target_reached(rec.trajectory.final_state()));
}

// Grid oracle for the three-step problem on the robot model. The two
// channels (q0, dq0) and (z, dz) are driven by separate inputs, so each is
// enumerated on its own: 21 levels per input and step.

const LEVELS: usize = 21;
const N: usize = 3;
const DT: f64 = 0.01;

struct Channel {
    /// Images `(p, v)` of grid sequences, with their worst constraint violation.
    images: Vec<([f64; 2], f64)>,
    /// Half-widths of the terminal error from rounding an input to the grid.
    delta: [f64; 2],
    /// Convex hull of strictly feasible images.
    hull: Vec<[f64; 2]>,
}

fn simulate(p: f64, v: f64, u: [f64; N]) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(N);
    let (mut p, mut v) = (p, v);
    for a in u {
        p += DT * v;
        v += DT * a;
        out.push([p, v]);
    }
    out
}

/// Violation in units of the rounding bound; 0 when strictly feasible.
fn ratio(violation: f64, bound: f64) -> f64 {
    if violation <= 0.0 {
        0.0
    } else if bound == 0.0 {
        f64::INFINITY
    } else {
        violation / bound
    }
}

fn channel(p0: f64, v0: f64, umax: f64, pbox: (f64, f64), vbox: (f64, f64)) -> Channel {
    let s = 2.0 * umax / (LEVELS - 1) as f64;
    let level = |i: usize| -umax + s * i as f64;
    // rounding every input by s/2 moves x_t by sum_j |A^(t-1-j) B| s/2
    let dev = |t: usize| -> [f64; 2] {
        let dp: f64 = (0..t).map(|j| (t - 1 - j) as f64 * DT * DT).sum();
        [dp * s / 2.0, t as f64 * DT * s / 2.0]
    };
    let mut images = Vec::with_capacity(LEVELS.pow(N as u32));
    for i in 0..LEVELS {
        for j in 0..LEVELS {
            for k in 0..LEVELS {
                let path = simulate(p0, v0, [level(i), level(j), level(k)]);
                let mut excess = 0.0f64;
                for (t, x) in path[..N - 1].iter().enumerate() {
                    let d = dev(t + 1);
                    let vp = (pbox.0 - x[0]).max(x[0] - pbox.1);
                    let vv = (vbox.0 - x[1]).max(x[1] - vbox.1);
                    excess = excess.max(ratio(vp, d[0])).max(ratio(vv, d[1]));
                }
                images.push((path[N - 1], excess));
            }
        }
    }
    let feasible: Vec<[f64; 2]> = images
        .iter()
        .filter(|(_, e)| *e == 0.0)
        .map(|(x, _)| *x)
        .collect();
    Channel {
        images,
        delta: dev(N),
        hull: convex_hull(feasible),
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

impl Channel {
    /// Surely reachable: inside the hull of feasible grid images.
    fn inner(&self, x: [f64; 2]) -> bool {
        let h = &self.hull;
        h.len() >= 3
            && (0..h.len()).all(|i| {
                let (a, b) = (h[i], h[(i + 1) % h.len()]);
                let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
                cross(a, b, x) >= 1e-12 * len
            })
    }

    /// Possibly reachable: within rounding distance of a grid image whose
    /// path violates the constraints by no more than rounding can explain.
    fn outer(&self, x: [f64; 2]) -> bool {
        self.images.iter().any(|(y, excess)| {
            *excess <= 1.0 + 1e-9
                && (y[0] - x[0]).abs() <= self.delta[0] * (1.0 + 1e-9) + 1e-15
                && (y[1] - x[1]).abs() <= self.delta[1] * (1.0 + 1e-9) + 1e-15
        })
    }
}

#[test]
fn three_step_plan_matches_input_grid_oracle() {
    let c = IlmpcConfig {
        exhaustive: true,
        parallel: false,
        ..cfg(N)
    };
    let (task, model, store) = robot_store(&ORDER, 2, &cfg(12));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut samples, mut tight, mut sandwiched) = (0, 0, 0);
    while samples < 40 {
        let e = &store.executions[rng.random_range(0..store.len())];
        let k = rng.random_range(0..e.trajectory.len());
        let base = &e.trajectory.states[k];
        let p = task.position_of(base);
        let sub = &task.subtasks[p];
        // keep the whole horizon inside one subtask so the channels decouple
        if base[0] < sub.start + 0.12 || base[0] > sub.end - 0.12 || p + 1 == task.len() {
            continue;
        }
        let scale = if rng.random_bool(0.5) { 1.0 } else { 6.0 };
        let x = [
            base[0] + scale * rng.random_range(-2e-4..2e-4),
            (base[1] + scale * rng.random_range(-0.01..0.01)).clamp(-PI, PI),
            (base[2] + scale * rng.random_range(-3e-5..3e-5))
                .clamp(sub.workspace.lower[2], sub.workspace.upper[2]),
            (base[3] + scale * rng.random_range(-2e-3..2e-3)).clamp(-1.0, 1.0),
        ];
        samples += 1;
        let ws = &sub.workspace;
        let q = channel(
            x[0],
            x[1],
            PI,
            (ws.lower[0], ws.upper[0]),
            (ws.lower[1], ws.upper[1]),
        );
        let h = channel(
            x[2],
            x[3],
            0.6,
            (ws.lower[2], ws.upper[2]),
            (ws.lower[3], ws.upper[3]),
        );
        let (mut inner, mut outer) = (f64::INFINITY, f64::INFINITY);
        for f in &store.executions {
            for (j, z) in f.trajectory.states.iter().enumerate() {
                if (z[0] - x[0]).abs() > 0.2 {
                    continue;
                }
                let cost = N as f64 + f.cost_to_go[j];
                let (zq, zh) = ([z[0], z[1]], [z[2], z[3]]);
                if cost < inner && q.inner(zq) && h.inner(zh) {
                    inner = cost;
                }
                if cost < outer && q.outer(zq) && h.outer(zh) {
                    outer = cost;
                }
            }
        }
        let got = match solve_step(&model, &task, &store, &c, &x) {
            Ok(sol) => sol.cost,
            Err(Error::ControllerFailure { .. }) => f64::INFINITY,
            Err(e) => panic!("{e}"),
        };
        assert!(
            outer <= got && got <= inner,
            "x = {x:?}: oracle [{outer}, {inner}], controller {got}"
        );
        if inner.is_finite() {
            sandwiched += 1;
        }
        if inner == outer {
            tight += 1;
        }
    }
    // both verdicts must be exercised, and the bracket should usually close
    assert!(
        sandwiched >= 10 && samples - sandwiched >= 10,
        "{sandwiched} of {samples} feasible"
    );
    assert!(tight >= 36, "only {tight} of {samples} brackets closed");
}
