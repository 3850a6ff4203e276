//! Workflows behind the command-line tool and their files on disk.
//!
//! Layout of a run directory:
//!
//! ```text
//! <out>/<name>/safeset.json
//! <out>/<name>/costs.csv
//! <out>/<name>/trajectories/iter_<j>.csv
//! <out>/<name>/report.txt
//! ```
//!
//! Racing runs add `centerline.csv`. Evaluation adds `comparison.json`
//! (which also carries wall times) and keeps one trajectory directory per
//! initialization.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::config::{RunConfig, Scenario};
use crate::dynamics::{ModelSpec, StateVec};
use crate::error::{Error, Result};
use crate::ilmpc::run_iteration;
use crate::safeset::{SafeSetStore, StoreKind, Trajectory};
use crate::scenarios::{centerline_csv, run_baseline};
use crate::task::TaskSpec;
use crate::tdmpc::{decompose, DecompositionResult};

#[derive(Debug, Clone)]
pub struct OrderRun {
    pub order: Vec<usize>,
    /// Baseline cost followed by one cost per ILMPC iteration.
    pub costs: Vec<f64>,
    pub store: SafeSetStore,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub runs: Vec<OrderRun>,
    pub merged: SafeSetStore,
}

/// Store holding only the baseline rollout for `order`.
pub fn baseline_store(cfg: &RunConfig, order: &[usize]) -> Result<SafeSetStore> {
    let (task, model) = cfg.scenario.build(order)?;
    let x0 = cfg.scenario.initial_state(order);
    let traj = run_baseline(cfg.scenario.baseline(), &task, &model, &x0)?;
    let mut store = SafeSetStore::new();
    store.record_labeled(&model, &task, traj, "baseline")?;
    Ok(store)
}

pub fn train_order(cfg: &RunConfig, order: &[usize]) -> Result<OrderRun> {
    let (task, model) = cfg.scenario.build(order)?;
    let x0 = cfg.scenario.initial_state(order);
    let mut store = baseline_store(cfg, order)?;
    let mut costs = vec![store.executions[0].cost()];
    for j in 0..cfg.training.iterations {
        let rec = run_iteration(&model, &task, &mut store, &cfg.ilmpc, &x0)?;
        log::info!("order {order:?} iteration {}: cost {}", j + 1, rec.cost);
        costs.push(rec.cost);
    }
    Ok(OrderRun {
        order: order.to_vec(),
        costs,
        store,
    })
}

/// Concatenate stores, renumbering executions.
pub fn merge(stores: &[&SafeSetStore]) -> SafeSetStore {
    let mut out = SafeSetStore::new();
    for s in stores {
        for e in &s.executions {
            let mut e = e.clone();
            e.iteration = out.executions.len();
            out.executions.push(e);
        }
    }
    out
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let runs = cfg
        .training
        .orders
        .iter()
        .map(|o| train_order(cfg, o))
        .collect::<Result<Vec<_>>>()?;
    let merged = merge(&runs.iter().map(|r| &r.store).collect::<Vec<_>>());
    Ok(TrainOutcome { runs, merged })
}

/// Closed-loop iterations from one initial store.
#[derive(Debug, Clone, Default)]
pub struct Arm {
    pub costs: Vec<f64>,
    pub wall_times: Vec<f64>,
    pub trajectories: Vec<Trajectory>,
    pub max_violation: f64,
    /// Reason and partial trajectory of a failed iteration.
    pub failure: Option<(String, Trajectory)>,
}

pub fn run_arm(
    model: &ModelSpec,
    task: &TaskSpec,
    mut store: SafeSetStore,
    cfg: &RunConfig,
    x0: &[f64],
    iterations: usize,
) -> Arm {
    let mut arm = Arm::default();
    for _ in 0..iterations {
        let t = Instant::now();
        match run_iteration(model, task, &mut store, &cfg.ilmpc, x0) {
            Ok(rec) => {
                arm.wall_times.push(t.elapsed().as_secs_f64());
                arm.costs.push(rec.cost);
                arm.max_violation = arm.max_violation.max(rec.trajectory.max_violation(task));
                arm.trajectories.push(rec.trajectory);
            }
            Err(Error::IterationFailure { reason, trajectory }) => {
                arm.failure = Some((reason, *trajectory));
                break;
            }
            Err(e) => {
                arm.failure = Some((
                    e.to_string(),
                    Trajectory::new(Vec::new(), Vec::new(), Vec::new()),
                ));
                break;
            }
        }
    }
    arm
}

#[derive(Debug, Clone)]
pub struct EvaluateOutcome {
    pub order: Vec<usize>,
    pub decomposition: DecompositionResult,
    /// The start state is one of the decomposed states.
    pub start_covered: bool,
    /// Absent when the decomposition cannot start the task.
    pub tdmpc: Option<Arm>,
    pub baseline: Arm,
}

impl EvaluateOutcome {
    /// First-iteration cost ratio, TDMPC over baseline-initialized.
    pub fn first_ratio(&self) -> Option<f64> {
        let t = self.tdmpc.as_ref()?.costs.first()?;
        let b = self.baseline.costs.first()?;
        Some(t / b)
    }

    pub fn failed(&self) -> bool {
        self.baseline.failure.is_some() || self.tdmpc.as_ref().is_some_and(|a| a.failure.is_some())
    }
}

pub fn evaluate(
    cfg: &RunConfig,
    training: &SafeSetStore,
    order: &[usize],
) -> Result<EvaluateOutcome> {
    let (task, model) = cfg.scenario.build(order)?;
    let x0 = cfg.scenario.initial_state(order);
    let decomposition = decompose(training, &task, &model, &cfg.decompose)?;
    let start_covered = decomposition.contains_state(&x0);
    let iterations = cfg.evaluation.iterations;
    let tdmpc = (!decomposition.is_empty() && start_covered).then(|| {
        run_arm(
            &model,
            &task,
            decomposition.store.clone(),
            cfg,
            &x0,
            iterations,
        )
    });
    let baseline = run_arm(
        &model,
        &task,
        baseline_store(cfg, order)?,
        cfg,
        &x0,
        iterations,
    );
    Ok(EvaluateOutcome {
        order: order.to_vec(),
        decomposition,
        start_covered,
        tdmpc,
        baseline,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub execution: usize,
    pub steps: usize,
    /// Largest gap between replayed and stored states.
    pub max_deviation: f64,
    pub max_violation: f64,
    pub reached_target: bool,
    pub states: Vec<StateVec>,
}

/// Re-simulate a stored execution open-loop from its first state.
pub fn replay(cfg: &RunConfig, store: &SafeSetStore, execution: usize) -> Result<ReplayReport> {
    let e = store
        .executions
        .get(execution)
        .ok_or_else(|| Error::Lookup(format!("no execution {execution} in the store")))?;
    let (task, model) = cfg.scenario.build(&e.order)?;
    let t = &e.trajectory;
    let mut x = t.states[0].clone();
    let mut states = vec![x.clone()];
    let mut dev = 0.0f64;
    for k in 0..t.len() - 1 {
        x = model.step(&x, &t.inputs[k])?;
        dev = dev.max(
            x.iter()
                .zip(&t.states[k + 1])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
        states.push(x.clone());
    }
    let replayed = Trajectory::from_rollout(&task, states.clone(), t.inputs.clone());
    Ok(ReplayReport {
        execution,
        steps: t.len() - 1,
        max_deviation: dev,
        max_violation: replayed.max_violation(&task),
        reached_target: task.target_reached(&x),
        states,
    })
}

pub fn run_dir(out: &Path, cfg: &RunConfig) -> PathBuf {
    out.join(&cfg.name)
}

fn create(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("trajectories"))?;
    Ok(())
}

/// Racing runs also get the planar centerline of `order` for plotting.
fn write_centerline(dir: &Path, cfg: &RunConfig, order: &[usize]) -> Result<()> {
    if let Scenario::Racing { track, .. } = &cfg.scenario {
        fs::write(
            dir.join("centerline.csv"),
            centerline_csv(track, order, 0.05),
        )?;
    }
    Ok(())
}

/// Columns `k, x_0..x_{n-1}, u_0..u_{m-1}, h, V`.
pub fn trajectory_csv(traj: &Trajectory, cost_to_go: &[f64]) -> String {
    let n = traj.states.first().map_or(0, |s| s.len());
    let m = traj.inputs.first().map_or(0, |u| u.len());
    let mut out = String::from("k");
    for i in 0..n {
        let _ = write!(out, ",x_{i}");
    }
    for i in 0..m {
        let _ = write!(out, ",u_{i}");
    }
    out.push_str(",h,V\n");
    for k in 0..traj.len() {
        let _ = write!(out, "{k}");
        for v in traj.states[k].iter().chain(&traj.inputs[k]) {
            let _ = write!(out, ",{v}");
        }
        let h = traj.stage_costs.get(k).copied().unwrap_or(f64::NAN);
        let v = cost_to_go.get(k).copied().unwrap_or(f64::NAN);
        let _ = writeln!(out, ",{h},{v}");
    }
    out
}

pub fn write_train(dir: &Path, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    create(dir)?;
    outcome.merged.save(&dir.join("safeset.json"))?;
    let mut costs = String::from("order,iteration,cost\n");
    let mut report = format!("scenario: {}\nseed: {}\n", cfg.scenario.name(), cfg.seed);
    for (i, r) in outcome.runs.iter().enumerate() {
        for (j, c) in r.costs.iter().enumerate() {
            let _ = writeln!(costs, "{i},{j},{c}");
        }
        let _ = writeln!(report, "order {i} {:?}: costs {:?}", r.order, r.costs);
    }
    let _ = writeln!(report, "stored executions: {}", outcome.merged.len());
    fs::write(dir.join("costs.csv"), costs)?;
    for e in &outcome.merged.executions {
        fs::write(
            dir.join("trajectories")
                .join(format!("iter_{}.csv", e.iteration)),
            trajectory_csv(&e.trajectory, &e.cost_to_go),
        )?;
    }
    fs::write(dir.join("report.txt"), report)?;
    write_centerline(dir, cfg, &cfg.training.orders[0])
}

#[derive(Serialize)]
struct RelinkFile<'a> {
    order: &'a [usize],
    relinks: &'a [crate::tdmpc::Relink],
    pruned: &'a [crate::tdmpc::Pruned],
}

pub fn write_decompose(dir: &Path, result: &DecompositionResult) -> Result<()> {
    create(dir)?;
    result.store.save(&dir.join("safeset.json"))?;
    let links = RelinkFile {
        order: &result.order,
        relinks: &result.relinks,
        pruned: &result.pruned,
    };
    fs::write(
        dir.join("relinks.json"),
        serde_json::to_string_pretty(&links)? + "\n",
    )?;
    let mut costs = String::from("trajectory,position,cost\n");
    for e in &result.store.executions {
        let p = e.origin.as_ref().map_or(0, |o| o.position);
        let _ = writeln!(costs, "{},{p},{}", e.iteration, e.cost());
    }
    fs::write(dir.join("costs.csv"), costs)?;
    for e in &result.store.executions {
        fs::write(
            dir.join("trajectories")
                .join(format!("iter_{}.csv", e.iteration)),
            trajectory_csv(&e.trajectory, &e.cost_to_go),
        )?;
    }
    fs::write(dir.join("report.txt"), result.report())?;
    Ok(())
}

#[derive(Serialize)]
struct ArmSummary<'a> {
    costs: &'a [f64],
    wall_times_s: &'a [f64],
    max_violation: f64,
    failure: Option<&'a str>,
}

impl<'a> ArmSummary<'a> {
    fn of(a: &'a Arm) -> Self {
        ArmSummary {
            costs: &a.costs,
            wall_times_s: &a.wall_times,
            max_violation: a.max_violation,
            failure: a.failure.as_ref().map(|f| f.0.as_str()),
        }
    }
}

#[derive(Serialize)]
struct Comparison<'a> {
    order: &'a [usize],
    decomposition_empty: bool,
    start_covered: bool,
    tdmpc: Option<ArmSummary<'a>>,
    baseline: ArmSummary<'a>,
    first_iteration_ratio: Option<f64>,
}

fn write_arm(dir: &Path, name: &str, arm: &Arm) -> Result<()> {
    let sub = dir.join("trajectories").join(name);
    fs::create_dir_all(&sub)?;
    for (j, t) in arm.trajectories.iter().enumerate() {
        let v = crate::safeset::suffix_sums(&t.stage_costs);
        fs::write(
            sub.join(format!("iter_{}.csv", j + 1)),
            trajectory_csv(t, &v),
        )?;
    }
    if let Some((_, t)) = &arm.failure {
        let v = crate::safeset::suffix_sums(&t.stage_costs);
        fs::write(sub.join("failed.csv"), trajectory_csv(t, &v))?;
    }
    Ok(())
}

pub fn write_evaluate(dir: &Path, cfg: &RunConfig, outcome: &EvaluateOutcome) -> Result<()> {
    create(dir)?;
    let mut store = outcome.decomposition.store.clone();
    store.kind = StoreKind::Decomposed;
    store.save(&dir.join("safeset.json"))?;
    let tdmpc_costs = outcome.tdmpc.as_ref().map_or(&[][..], |a| &a.costs[..]);
    let rows = tdmpc_costs.len().max(outcome.baseline.costs.len());
    let mut costs = String::from("iteration,tdmpc,baseline\n");
    let cell = |v: Option<&f64>| v.map_or(String::new(), |c| c.to_string());
    for j in 0..rows {
        let _ = writeln!(
            costs,
            "{},{},{}",
            j + 1,
            cell(tdmpc_costs.get(j)),
            cell(outcome.baseline.costs.get(j))
        );
    }
    fs::write(dir.join("costs.csv"), costs)?;
    let cmp = Comparison {
        order: &outcome.order,
        decomposition_empty: outcome.decomposition.is_empty(),
        start_covered: outcome.start_covered,
        tdmpc: outcome.tdmpc.as_ref().map(ArmSummary::of),
        baseline: ArmSummary::of(&outcome.baseline),
        first_iteration_ratio: outcome.first_ratio(),
    };
    fs::write(
        dir.join("comparison.json"),
        serde_json::to_string_pretty(&cmp)? + "\n",
    )?;
    if let Some(a) = &outcome.tdmpc {
        write_arm(dir, "tdmpc", a)?;
    }
    write_arm(dir, "baseline", &outcome.baseline)?;
    let mut report = format!("scenario: {}\nseed: {}\n", cfg.scenario.name(), cfg.seed);
    report.push_str(&outcome.decomposition.report());
    let _ = writeln!(report, "start state covered: {}", outcome.start_covered);
    match &outcome.tdmpc {
        Some(a) => {
            let _ = writeln!(report, "tdmpc costs: {:?}", a.costs);
        }
        None => {
            let _ = writeln!(
                report,
                "tdmpc: not run (decomposition cannot start the task)"
            );
        }
    }
    let _ = writeln!(
        report,
        "baseline-initialized costs: {:?}",
        outcome.baseline.costs
    );
    if let Some(r) = outcome.first_ratio() {
        let _ = writeln!(report, "first-iteration ratio: {r:.3}");
    }
    for (name, arm) in [
        ("tdmpc", outcome.tdmpc.as_ref()),
        ("baseline", Some(&outcome.baseline)),
    ] {
        if let Some((reason, _)) = arm.and_then(|a| a.failure.as_ref()) {
            let _ = writeln!(report, "{name} failed: {reason}");
        }
    }
    fs::write(dir.join("report.txt"), report)?;
    write_centerline(dir, cfg, &outcome.order)
}
