//! Task decomposition: transfer recorded executions to a new subtask order.
//!
//! Executions are cut at subtask boundaries and re-anchored on the progress
//! coordinate of the new order. Working backwards from the last position, the
//! guard (final) state of every segment is linked to one downstream segment
//! by a one-step controllability problem ([`ctrb`]): some admissible input
//! must move the guard into the convex hull of that segment's states. Each
//! accepted link is replayed into a real trajectory that reaches the target,
//! so every stored state of the result carries an executable continuation.
//! Segments that cannot be linked are pruned.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{InputVec, ModelSpec, StateVec};
use crate::error::{Error, Result};
use crate::par;
use crate::safeset::{suffix_sums, Origin, SafeSetStore, Segment, StoreKind, Trajectory};
use crate::solver::{solve_qp, QpProblem, SolverSettings};
use crate::task::{BoxSet, TaskSpec};

/// Residual allowed between the true successor and the hull point for nonlinear models (relative).
pub const NONLINEAR_HULL_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CtrbStatus {
    Feasible,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtrbResult {
    pub status: CtrbStatus,
    pub input: InputVec,
    /// Convex weights, one per target state.
    pub weights: Vec<f64>,
    /// Weighted cost-to-go of the hull point.
    pub q_star: f64,
    /// `|step(x, u*) - weights' z|_inf`.
    pub residual: f64,
}

impl CtrbResult {
    fn infeasible() -> Self {
        CtrbResult {
            status: CtrbStatus::Infeasible,
            input: Vec::new(),
            weights: Vec::new(),
            q_star: f64::INFINITY,
            residual: f64::INFINITY,
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.status == CtrbStatus::Feasible
    }

    /// Stage cost at `x` plus the hull cost.
    pub fn objective(&self, stage: f64) -> f64 {
        stage + self.q_star
    }
}

/// One-step controllability of `x` into the convex hull of `z`, minimizing
/// the weighted cost-to-go `q`.
pub fn ctrb(
    model: &ModelSpec,
    x: &[f64],
    z: &[StateVec],
    q: &[f64],
    inputs: &BoxSet,
) -> Result<CtrbResult> {
    ctrb_with(model, x, z, q, inputs, &SolverSettings::default())
}

pub fn ctrb_with(
    model: &ModelSpec,
    x: &[f64],
    z: &[StateVec],
    q: &[f64],
    inputs: &BoxSet,
    settings: &SolverSettings,
) -> Result<CtrbResult> {
    let (n, m) = (model.state_dim(), model.input_dim());
    if z.is_empty() || z.len() != q.len() || z.iter().any(|s| s.len() != n) || inputs.dim() != m {
        return Err(Error::Contract("ctrb: dimension mismatch".into()));
    }
    model.check_dims(x, &inputs.lower)?;
    if let Some((a, b)) = model.linear_matrices() {
        let free = &a * DVector::from_column_slice(x);
        let res = hull_lp(&b, &free, z, q, inputs, settings)?;
        return Ok(certify(model, x, z, res, 1e-6));
    }
    let u0 = inputs.clamp(&vec![0.0; m]);
    let (a, b, c) = model.linearize(x, &u0)?;
    let free = &a * DVector::from_column_slice(x) + &c;
    let first = hull_lp(&b, &free, z, q, inputs, settings)?;
    if !first.is_feasible() {
        return Ok(first);
    }
    let (a, b, c) = model.linearize(x, &first.input)?;
    let free = &a * DVector::from_column_slice(x) + &c;
    let second = hull_lp(&b, &free, z, q, inputs, settings)?;
    if !second.is_feasible() {
        return Ok(second);
    }
    Ok(certify(model, x, z, second, NONLINEAR_HULL_TOL))
}

/// `min q'l  s.t.  B u + free = Z' l,  1'l = 1,  l >= 0,  u in box`.
fn hull_lp(
    b: &DMatrix<f64>,
    free: &DVector<f64>,
    z: &[StateVec],
    q: &[f64],
    inputs: &BoxSet,
    settings: &SolverSettings,
) -> Result<CtrbResult> {
    let (n, m, k) = (b.nrows(), b.ncols(), z.len());
    let nv = m + k;
    let mut aeq = DMatrix::zeros(n + 1, nv);
    let mut beq = DVector::zeros(n + 1);
    for i in 0..n {
        for j in 0..m {
            aeq[(i, j)] = b[(i, j)];
        }
        for (t, s) in z.iter().enumerate() {
            aeq[(i, m + t)] = -s[i];
        }
        beq[i] = -free[i];
    }
    for t in 0..k {
        aeq[(n, m + t)] = 1.0;
    }
    beq[n] = 1.0;
    let mut lower = DVector::zeros(nv);
    let mut upper = DVector::from_element(nv, f64::INFINITY);
    for j in 0..m {
        lower[j] = inputs.lower[j];
        upper[j] = inputs.upper[j];
    }
    let mut linear = DVector::zeros(nv);
    for t in 0..k {
        linear[m + t] = q[t];
    }
    let qp = QpProblem::new(nv)
        .with_objective(DMatrix::zeros(nv, nv), linear)
        .with_equalities(aeq, beq)
        .with_bounds(lower, upper);
    let sol = solve_qp(&qp, settings)?;
    if !sol.is_optimal() {
        return Ok(CtrbResult::infeasible());
    }
    let input: Vec<f64> = inputs.clamp(&sol.x.as_slice()[..m]);
    let weights: Vec<f64> = sol.x.as_slice()[m..].iter().map(|w| w.max(0.0)).collect();
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let q_star = weights.iter().zip(q).map(|(w, c)| w * c).sum();
    Ok(CtrbResult {
        status: CtrbStatus::Feasible,
        input,
        weights,
        q_star,
        residual: 0.0,
    })
}

fn hull_point(z: &[StateVec], weights: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; z[0].len()];
    for (s, w) in z.iter().zip(weights) {
        for (pi, si) in p.iter_mut().zip(s) {
            *pi += w * si;
        }
    }
    p
}

fn certify(
    model: &ModelSpec,
    x: &[f64],
    z: &[StateVec],
    mut res: CtrbResult,
    rel_tol: f64,
) -> CtrbResult {
    if !res.is_feasible() {
        return res;
    }
    let succ = model.step_unchecked(x, &res.input);
    let hull = hull_point(z, &res.weights);
    let scale = hull.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    res.residual = succ
        .iter()
        .zip(&hull)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if res.residual > rel_tol * scale {
        return CtrbResult::infeasible();
    }
    res
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeConfig {
    #[serde(default = "default_true")]
    pub parallel: bool,
    /// Largest workspace violation tolerated on a replayed relink tail.
    pub replay_tol: f64,
    #[serde(default)]
    pub solver: SolverSettings,
}

fn default_true() -> bool {
    true
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        DecomposeConfig {
            parallel: true,
            replay_tol: 1e-6,
            solver: SolverSettings::default(),
        }
    }
}

/// Link from a guard state to a downstream trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relink {
    /// Index of the linked trajectory in the decomposed store.
    pub trajectory: usize,
    /// Recorded execution the segment came from.
    pub source: usize,
    pub position: usize,
    pub subtask: usize,
    /// Index of the guard state within the decomposed trajectory.
    pub guard_index: usize,
    /// Decomposed trajectory whose hull was entered.
    pub target: usize,
    pub input: InputVec,
    /// Nonzero convex weights as (state index in target, weight).
    pub weights: Vec<(usize, f64)>,
    pub q_star: f64,
    pub residual: f64,
    /// Feasible links rejected by replay before this one was accepted.
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pruned {
    pub source: usize,
    pub position: usize,
    pub subtask: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct DecompositionResult {
    pub order: Vec<usize>,
    pub store: SafeSetStore,
    pub relinks: Vec<Relink>,
    pub pruned: Vec<Pruned>,
    /// Per stored trajectory: cost-to-go over its own segment assigned by the
    /// link (`h + Q*` at the guard, then the backward recursion).
    pub link_costs: Vec<Vec<f64>>,
    /// Recorded segments available per position.
    pub offered: Vec<usize>,
}

impl DecompositionResult {
    /// No trajectory survives at the first position.
    pub fn is_empty(&self) -> bool {
        !self
            .store
            .executions
            .iter()
            .any(|e| e.origin.as_ref().is_some_and(|o| o.position == 0))
    }

    pub fn survivors_at(&self, position: usize) -> usize {
        self.store
            .executions
            .iter()
            .filter(|e| e.origin.as_ref().is_some_and(|o| o.position == position))
            .count()
    }

    /// `x` is one of the stored states.
    pub fn contains_state(&self, x: &[f64]) -> bool {
        self.store
            .executions
            .iter()
            .any(|e| e.trajectory.states.iter().any(|s| s.as_slice() == x))
    }

    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "order: {:?}", self.order);
        let _ = writeln!(out, "stored trajectories: {}", self.store.len());
        let _ = writeln!(
            out,
            "result: {}",
            if self.is_empty() {
                "empty"
            } else {
                "non-empty"
            }
        );
        for p in 0..self.order.len() {
            let prunes = self.pruned.iter().filter(|x| x.position == p).count();
            let fallbacks = self
                .relinks
                .iter()
                .filter(|r| r.position == p && r.rejected > 0)
                .count();
            let _ = writeln!(
                out,
                "position {p} (subtask {}): offered {}, survived {}, pruned {prunes}, replay fallbacks {fallbacks}",
                self.order[p],
                self.offered[p],
                self.survivors_at(p)
            );
        }
        let _ = writeln!(out, "prunes: {}", self.pruned.len());
        for x in &self.pruned {
            let _ = writeln!(
                out,
                "  execution {} subtask {} at position {}: {}",
                x.source, x.subtask, x.position, x.reason
            );
        }
        out
    }
}

/// A segment lifted into the new order, before and after linking.
#[derive(Debug, Clone)]
struct Lifted {
    source: usize,
    subtask: usize,
    states: Vec<StateVec>,
    inputs: Vec<InputVec>,
    /// Length of the segment part; the rest is the replayed continuation.
    body: usize,
    cost_to_go: Vec<f64>,
    link_costs: Vec<f64>,
    link: Option<(usize, CtrbResult, usize)>,
}

fn lift(
    task: &TaskSpec,
    traj: &Trajectory,
    seg: &Segment,
    p: usize,
    source: usize,
) -> Option<Lifted> {
    let pi = task.progress_index;
    let shift = task.start_of(p) - seg.start_progress;
    let last_in_source = seg.last + 1 == traj.len();
    let span = task.subtasks[p].end - task.subtasks[p].start;
    let mut states = Vec::new();
    let mut inputs = Vec::new();
    for k in seg.first..=seg.last {
        let mut s = traj.states[k].clone();
        if last_in_source && p + 1 < task.len() && s[pi] - seg.start_progress > span {
            break;
        }
        s[pi] += shift;
        if task.position_of(&s) < p {
            continue;
        }
        states.push(s);
        inputs.push(traj.inputs[k].clone());
    }
    if states.is_empty() {
        return None;
    }
    let body = states.len();
    Some(Lifted {
        source,
        subtask: seg.subtask,
        states,
        inputs,
        body,
        cost_to_go: Vec::new(),
        link_costs: Vec::new(),
        link: None,
    })
}

/// Largest workspace violation along `states`, each against its own position.
fn worst_violation(task: &TaskSpec, states: &[StateVec]) -> f64 {
    states.iter().map(|s| task.violation(s)).fold(0.0, f64::max)
}

fn segments_ok(model: &ModelSpec, task: &TaskSpec, traj: &Trajectory, p: usize) -> bool {
    match traj.segmentation(model, task) {
        Ok(segs) => {
            segs.first().map(|s| s.position) == Some(p)
                && segs.last().map(|s| s.position) == Some(task.len() - 1)
        }
        Err(_) => false,
    }
}

fn finish(task: &TaskSpec, mut l: Lifted) -> Lifted {
    let costs: Vec<f64> = l
        .states
        .iter()
        .zip(&l.inputs)
        .map(|(x, u)| task.stage_cost(x, u))
        .collect();
    l.cost_to_go = suffix_sums(&costs);
    l
}

/// Complete a segment placed at the last position.
fn complete_last(
    model: &ModelSpec,
    task: &TaskSpec,
    store: &SafeSetStore,
    mut l: Lifted,
    seg: &Segment,
    tol: f64,
) -> std::result::Result<Lifted, String> {
    let src = &store.executions[l.source].trajectory;
    let pi = task.progress_index;
    let shift = task.start_of(task.len() - 1) - seg.start_progress;
    if !task.target_reached(l.states.last().unwrap()) {
        let Some(next) = src.states.get(seg.last + 1) else {
            return Err("segment ends outside the target".into());
        };
        let mut y = next.clone();
        y[pi] += shift;
        if !task.target_reached(&y) {
            return Err("recorded successor is outside the target".into());
        }
        l.states.push(y);
        l.inputs.push(vec![0.0; model.input_dim()]);
    } else {
        // keep exactly one state inside the target
        let first_in = l
            .states
            .iter()
            .position(|s| task.target_reached(s))
            .unwrap();
        l.states.truncate(first_in + 1);
        l.inputs.truncate(first_in + 1);
        l.body = l.body.min(l.states.len());
    }
    *l.inputs.last_mut().unwrap() = vec![0.0; model.input_dim()];
    if worst_violation(task, &l.states) > tol {
        return Err("segment violates the workspace".into());
    }
    let p = task.len() - 1;
    let traj = Trajectory::from_rollout(task, l.states.clone(), l.inputs.clone());
    if !segments_ok(model, task, &traj, p) {
        return Err("segment does not stay in the last subtask".into());
    }
    let mut l = finish(task, l);
    l.link_costs = l.cost_to_go[..l.body].to_vec();
    Ok(l)
}

/// Replay a link: guard input `u*`, then the weighted inputs of the target.
fn replay(
    model: &ModelSpec,
    task: &TaskSpec,
    l: &Lifted,
    target: &Lifted,
    res: &CtrbResult,
    tol: f64,
) -> Option<Lifted> {
    let m = model.input_dim();
    let mut states = l.states.clone();
    let mut inputs = l.inputs.clone();
    *inputs.last_mut().unwrap() = res.input.clone();
    let mut y = model.step_unchecked(states.last().unwrap(), &res.input);
    let support: Vec<(usize, f64)> = res
        .weights
        .iter()
        .cloned()
        .enumerate()
        .filter(|(_, w)| *w > 0.0)
        .collect();
    let cap = target.states.len() + 2;
    let ib = &task.subtasks[task.len() - 1].inputs;
    for step in 0.. {
        if task.violation(&y) > tol {
            return None;
        }
        if task.target_reached(&y) {
            states.push(y);
            inputs.push(vec![0.0; m]);
            break;
        }
        if step >= cap {
            return None;
        }
        let mut u = vec![0.0; m];
        for &(t, w) in &support {
            if let Some(ut) = target.inputs.get(t + step) {
                for i in 0..m {
                    u[i] += w * ut[i];
                }
            }
        }
        let p = task.position_of(&y);
        let u = task.subtasks[p].inputs.intersect(ib).clamp(&u);
        let next = model.step_unchecked(&y, &u);
        states.push(y);
        inputs.push(u);
        y = next;
    }
    let p = task.position_of(&states[0]);
    let traj = Trajectory::from_rollout(task, states.clone(), inputs.clone());
    if !segments_ok(model, task, &traj, p) {
        return None;
    }
    Some(finish(
        task,
        Lifted {
            states,
            inputs,
            ..l.clone()
        },
    ))
}

/// Interval of `step(x, u)` over the input box.
fn reach_box(model: &ModelSpec, x: &[f64], inputs: &BoxSet) -> (Vec<f64>, Vec<f64>) {
    if let Some((a, b)) = model.linear_matrices() {
        let free = &a * DVector::from_column_slice(x);
        let mut lo: Vec<f64> = free.iter().cloned().collect();
        let mut hi = lo.clone();
        for j in 0..lo.len() {
            for i in 0..b.ncols() {
                let (p, q) = (b[(j, i)] * inputs.lower[i], b[(j, i)] * inputs.upper[i]);
                lo[j] += p.min(q);
                hi[j] += p.max(q);
            }
        }
        return (lo, hi);
    }
    let m = inputs.dim();
    let mut pts: Vec<Vec<f64>> = (0..1usize << m)
        .map(|mask| {
            (0..m)
                .map(|i| {
                    if mask & (1 << i) != 0 {
                        inputs.upper[i]
                    } else {
                        inputs.lower[i]
                    }
                })
                .collect()
        })
        .collect();
    pts.push(inputs.clamp(&vec![0.0; m]));
    let succ: Vec<Vec<f64>> = pts.iter().map(|u| model.step_unchecked(x, u)).collect();
    let n = x.len();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for s in &succ {
        for j in 0..n {
            lo[j] = lo[j].min(s[j]);
            hi[j] = hi[j].max(s[j]);
        }
    }
    for j in 0..n {
        let pad = 0.5 * (hi[j] - lo[j]) + 1e-3 * hi[j].abs().max(lo[j].abs()).max(1.0);
        lo[j] -= pad;
        hi[j] += pad;
    }
    (lo, hi)
}

fn bounding_box(states: &[StateVec]) -> (Vec<f64>, Vec<f64>) {
    let n = states[0].len();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for s in states {
        for j in 0..n {
            lo[j] = lo[j].min(s[j]);
            hi[j] = hi[j].max(s[j]);
        }
    }
    (lo, hi)
}

/// Link one guard to the cheapest downstream segment whose replay succeeds.
fn link(
    model: &ModelSpec,
    task: &TaskSpec,
    l: &Lifted,
    downstream: &[Lifted],
    boxes: &[(Vec<f64>, Vec<f64>)],
    cfg: &DecomposeConfig,
) -> std::result::Result<Lifted, String> {
    let guard = l.states.last().unwrap();
    let p = task.position_of(guard);
    let inputs = &task.subtasks[p].inputs;
    let (rlo, rhi) = reach_box(model, guard, inputs);
    let tol = 1e-9;
    let mut order: Vec<(f64, usize)> = downstream
        .iter()
        .enumerate()
        .filter(|(j, _)| {
            let (lo, hi) = &boxes[*j];
            (0..lo.len()).all(|i| rhi[i] >= lo[i] - tol && rlo[i] <= hi[i] + tol)
        })
        .map(|(j, d)| {
            (
                d.cost_to_go[..d.body]
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min),
                j,
            )
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut pending: Vec<(f64, usize, CtrbResult)> = Vec::new();
    let mut next = 0;
    let mut rejected = 0;
    let mut solved = 0;
    loop {
        // solve every link whose lower bound could still beat the best pending one
        while next < order.len() && pending.first().is_none_or(|b| order[next].0 <= b.0) {
            let j = order[next].1;
            next += 1;
            let d = &downstream[j];
            let res = ctrb_with(
                model,
                guard,
                &d.states[..d.body],
                &d.cost_to_go[..d.body],
                inputs,
                &cfg.solver,
            )
            .map_err(|e| e.to_string())?;
            solved += 1;
            if res.is_feasible() {
                pending.push((res.q_star, j, res));
                pending.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            }
        }
        if pending.is_empty() {
            return Err(if rejected == 0 {
                format!(
                    "guard cannot reach any of {} downstream segments ({solved} solved)",
                    downstream.len()
                )
            } else {
                format!("all {rejected} feasible links failed replay")
            });
        }
        let (_, j, res) = pending.remove(0);
        if let Some(mut out) = replay(model, task, l, &downstream[j], &res, cfg.replay_tol) {
            let h = task.stage_cost(guard, &res.input);
            let mut costs = vec![0.0; l.body];
            costs[l.body - 1] = res.objective(h);
            for k in (0..l.body - 1).rev() {
                costs[k] = costs[k + 1] + task.stage_cost(&l.states[k], &l.inputs[k]);
            }
            out.link_costs = costs;
            out.link = Some((j, res, rejected));
            return Ok(out);
        }
        rejected += 1;
    }
}

/// Transfer the recorded executions in `store` to the order of `task`.
pub fn decompose(
    store: &SafeSetStore,
    task: &TaskSpec,
    model: &ModelSpec,
    cfg: &DecomposeConfig,
) -> Result<DecompositionResult> {
    if store.is_empty() {
        return Err(Error::Contract("decompose needs a non-empty store".into()));
    }
    task.validate()?;
    let mut ids = task.order.clone();
    ids.sort_unstable();
    for e in &store.executions {
        let mut o = e.order.clone();
        o.sort_unstable();
        if o != ids {
            return Err(Error::Contract(format!(
                "execution {} uses a different subtask library",
                e.iteration
            )));
        }
        if e.trajectory.segments.is_empty() {
            return Err(Error::Contract(format!(
                "execution {} is not segmented",
                e.iteration
            )));
        }
    }
    let big_m = task.len();
    let mut layers: Vec<Vec<Lifted>> = vec![Vec::new(); big_m];
    let mut pruned = Vec::new();
    let mut offered = vec![0; big_m];
    for p in (0..big_m).rev() {
        let id = task.order[p];
        let sources: Vec<(usize, &Segment)> = store
            .executions
            .iter()
            .flat_map(|e| {
                e.trajectory
                    .segments
                    .iter()
                    .filter(|s| s.subtask == id)
                    .map(move |s| (e.iteration, s))
            })
            .collect();
        offered[p] = sources.len();
        let boxes: Vec<(Vec<f64>, Vec<f64>)> = if p + 1 < big_m {
            layers[p + 1]
                .iter()
                .map(|d| bounding_box(&d.states[..d.body]))
                .collect()
        } else {
            Vec::new()
        };
        let downstream = if p + 1 < big_m {
            &layers[p + 1][..]
        } else {
            &[][..]
        };
        let results = par::map(&sources, cfg.parallel, |&(src, seg)| {
            let traj = &store.executions[src].trajectory;
            let Some(l) = lift(task, traj, seg, p, src) else {
                return Err("segment has no state inside its new position".to_string());
            };
            if p + 1 == big_m {
                complete_last(model, task, store, l, seg, cfg.replay_tol)
            } else {
                link(model, task, &l, downstream, &boxes, cfg)
            }
        });
        for ((src, seg), r) in sources.iter().zip(results) {
            match r {
                Ok(l) => layers[p].push(l),
                Err(reason) => pruned.push(Pruned {
                    source: *src,
                    position: p,
                    subtask: seg.subtask,
                    reason,
                }),
            }
        }
        log::debug!(
            "position {p}: {} of {} segments linked",
            layers[p].len(),
            offered[p]
        );
    }

    // number trajectories by position, then by layer index
    let mut base = vec![0; big_m + 1];
    for p in 0..big_m {
        base[p + 1] = base[p] + layers[p].len();
    }
    let mut out = SafeSetStore {
        kind: StoreKind::Decomposed,
        executions: Vec::with_capacity(base[big_m]),
    };
    let mut relinks = Vec::new();
    let mut link_costs = Vec::new();
    let mut chains: Vec<Vec<usize>> = vec![Vec::new(); base[big_m]];
    for p in (0..big_m).rev() {
        for (i, l) in layers[p].iter().enumerate() {
            if let Some((j, _, _)) = &l.link {
                let target = base[p + 1] + j;
                let mut c = vec![target];
                c.extend_from_slice(&chains[target]);
                chains[base[p] + i] = c;
            }
        }
    }
    for p in 0..big_m {
        for (i, l) in layers[p].iter().enumerate() {
            let id = base[p] + i;
            let traj = Trajectory::from_rollout(task, l.states.clone(), l.inputs.clone());
            let k = out.record_labeled(model, task, traj, "decomposed")?;
            debug_assert_eq!(k, id);
            let e = &mut out.executions[k];
            debug_assert_eq!(e.cost_to_go, l.cost_to_go);
            e.origin = Some(Origin {
                source: l.source,
                position: p,
                relinked_to: chains[id].clone(),
            });
            link_costs.push(l.link_costs.clone());
            if let Some((j, res, rejected)) = &l.link {
                relinks.push(Relink {
                    trajectory: id,
                    source: l.source,
                    position: p,
                    subtask: l.subtask,
                    guard_index: l.body - 1,
                    target: base[p + 1] + j,
                    input: res.input.clone(),
                    weights: res
                        .weights
                        .iter()
                        .cloned()
                        .enumerate()
                        .filter(|(_, w)| *w > 0.0)
                        .collect(),
                    q_star: res.q_star,
                    residual: res.residual,
                    rejected: *rejected,
                });
            }
        }
    }
    Ok(DecompositionResult {
        order: task.order.clone(),
        store: out,
        relinks,
        pruned,
        link_costs,
        offered,
    })
}
