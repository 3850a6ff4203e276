//! Iterative learning MPC with a sampled terminal safe set.
//!
//! At every step the controller plans `N` inputs that land exactly on a stored
//! state (or inside the target set) and pays `N + V(candidate)`, where `V` is
//! the stored time-to-go. Candidates are evaluated in increasing total cost and
//! the first feasible cost level wins; within a level a small input-effort
//! regularizer breaks ties. The shifted plan of the previous step is always a
//! candidate, so feasibility is inherited from step to step.
//!
//! Linear models use the condensed prediction directly. Nonlinear models are
//! handled by sequential linearization about the previous iterate with a trust
//! region on the input change.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{InputVec, ModelSpec, StateVec};
use crate::error::{Error, Result};
use crate::par;
use crate::safeset::{SafeSetStore, Trajectory};
use crate::solver::{solve_qp_from, QpProblem, SolverSettings};
use crate::task::{BoxSet, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SqpSettings {
    pub max_iterations: usize,
    /// Factor applied to the trust radius after a rejected step.
    pub trust_shrink: f64,
    /// Converged once no input moves by more than this.
    pub input_tol: f64,
    /// Largest accepted gap between the simulated end state and the candidate.
    pub terminal_tol: f64,
}

impl Default for SqpSettings {
    fn default() -> Self {
        SqpSettings {
            max_iterations: 10,
            trust_shrink: 0.5,
            input_tol: 1e-6,
            terminal_tol: 1e-6,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IlmpcConfig {
    pub horizon: usize,
    /// Number of nearest stored states offered as terminal candidates.
    pub candidates: usize,
    pub max_steps: usize,
    /// Weight of the input-effort tie-breaker.
    pub regularizer: f64,
    /// Offer every stored state as a candidate.
    #[serde(default)]
    pub exhaustive: bool,
    #[serde(default = "default_true")]
    pub parallel: bool,
    #[serde(default)]
    pub sqp: SqpSettings,
    #[serde(default)]
    pub solver: SolverSettings,
}

impl Default for IlmpcConfig {
    fn default() -> Self {
        IlmpcConfig {
            horizon: 12,
            candidates: 20,
            max_steps: 2000,
            regularizer: 1e-4,
            exhaustive: false,
            parallel: true,
            sqp: SqpSettings::default(),
            solver: SolverSettings::default(),
        }
    }
}

impl IlmpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.max_steps == 0 || self.candidates == 0 {
            return Err(Error::Config(
                "horizon, candidates and max_steps must be positive".into(),
            ));
        }
        if !(self.regularizer > 0.0) {
            return Err(Error::Config("regularizer must be positive".into()));
        }
        if self.sqp.max_iterations == 0
            || !(self.sqp.trust_shrink > 0.0 && self.sqp.trust_shrink < 1.0)
        {
            return Err(Error::Config("invalid SQP settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TerminalChoice {
    /// Already in the target set; the input holds the state there.
    Hold,
    Stored {
        iteration: usize,
        index: usize,
        cost_to_go: f64,
    },
    Target {
        steps: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSolution {
    pub inputs: Vec<InputVec>,
    /// Predicted states, starting with the current state.
    pub states: Vec<StateVec>,
    pub terminal: TerminalChoice,
    /// Stage-cost sum over the horizon plus the terminal cost-to-go.
    pub cost: f64,
    /// Regularized objective of the chosen plan.
    pub objective: f64,
    /// QP (or SQP) subproblems attempted.
    pub solves: usize,
}

/// Flattened view of the stored states for fast scans.
struct SampleIndex {
    n: usize,
    m: usize,
    states: Vec<f64>,
    inputs: Vec<f64>,
    cost: Vec<f64>,
    next: Vec<Option<usize>>,
    iteration: Vec<usize>,
    step: Vec<usize>,
    position: Vec<usize>,
    in_target: Vec<bool>,
}

impl SampleIndex {
    fn build(store: &SafeSetStore, task: &TaskSpec, n: usize, m: usize) -> Self {
        let total = store.num_states();
        let mut idx = SampleIndex {
            n,
            m,
            states: Vec::with_capacity(total * n),
            inputs: Vec::with_capacity(total * m),
            cost: Vec::with_capacity(total),
            next: Vec::with_capacity(total),
            iteration: Vec::with_capacity(total),
            step: Vec::with_capacity(total),
            position: Vec::with_capacity(total),
            in_target: Vec::with_capacity(total),
        };
        for e in &store.executions {
            let t = &e.trajectory;
            let base = idx.cost.len();
            for k in 0..t.len() {
                idx.states.extend_from_slice(&t.states[k]);
                idx.inputs.extend_from_slice(&t.inputs[k]);
                idx.cost.push(e.cost_to_go[k]);
                idx.next.push((k + 1 < t.len()).then_some(base + k + 1));
                idx.iteration.push(e.iteration);
                idx.step.push(k);
                idx.position.push(task.position_of(&t.states[k]));
                idx.in_target.push(task.target_reached(&t.states[k]));
            }
        }
        idx
    }

    fn len(&self) -> usize {
        self.cost.len()
    }

    fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.n..(i + 1) * self.n]
    }

    fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.m..(i + 1) * self.m]
    }

    fn key(&self, i: usize) -> (usize, usize) {
        (self.iteration[i], self.step[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Term {
    Sample(usize),
    Target(usize),
}

#[derive(Debug, Clone)]
struct Cand {
    term: Term,
    horizon: usize,
    cost: f64,
    key: (usize, usize),
    /// Subtask position of each predicted state `x_1..x_n`.
    positions: Option<Vec<usize>>,
    warm: Option<Vec<InputVec>>,
}

#[derive(Debug, Clone)]
struct Plan {
    inputs: Vec<InputVec>,
    states: Vec<StateVec>,
    positions: Vec<usize>,
    objective: f64,
}

struct Memory {
    term: Term,
    positions: Vec<usize>,
    inputs: Vec<InputVec>,
}

/// Affine prediction `x_t = d_t + G_t U` for `t = 1..=n`.
struct Affine {
    d: Vec<DVector<f64>>,
    g: Vec<DMatrix<f64>>,
}

/// Assignments tried per candidate when the crossing time is not known.
const MAX_ASSIGNMENTS: usize = 5;
const CONST_ROW_TOL: f64 = 1e-9;
/// Terminal target box is shrunk by this margin so that solver tolerance does
/// not leave the simulated state a hair outside the target.
const TARGET_MARGIN: f64 = 1e-7;

/// Receding-horizon controller bound to a model, a task and a fixed store.
/// `(A^k, A^k B)` for `k = 0..N`.
type Powers = (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>);

pub struct Controller<'a> {
    model: &'a ModelSpec,
    task: &'a TaskSpec,
    cfg: &'a IlmpcConfig,
    index: SampleIndex,
    scale: Vec<f64>,
    /// Present for linear models.
    powers: Option<Powers>,
    /// Workspaces differ only in the progress interval.
    uniform: bool,
    union_box: BoxSet,
    memory: Option<Memory>,
}

impl<'a> Controller<'a> {
    pub fn new(
        model: &'a ModelSpec,
        task: &'a TaskSpec,
        store: &SafeSetStore,
        cfg: &'a IlmpcConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        if task.state_dim() != model.state_dim() {
            return Err(Error::Contract("task and model dimensions differ".into()));
        }
        let (n, m) = (model.state_dim(), model.input_dim());
        let index = SampleIndex::build(store, task, n, m);
        let powers = model.linear_matrices().map(|(a, b)| {
            let mut ap = vec![DMatrix::identity(n, n)];
            let mut apb = vec![b.clone()];
            for k in 1..=cfg.horizon {
                ap.push(&a * &ap[k - 1]);
                apb.push(&a * &apb[k - 1]);
            }
            (ap, apb)
        });
        let pi = task.progress_index;
        let first = &task.subtasks[0];
        let uniform = task.subtasks.iter().all(|s| {
            s.inputs == first.inputs
                && (0..n).all(|j| {
                    j == pi
                        || (s.workspace.lower[j] == first.workspace.lower[j]
                            && s.workspace.upper[j] == first.workspace.upper[j])
                })
        });
        let mut union_box = first.workspace.clone();
        union_box.upper[pi] = task.subtasks[task.len() - 1].workspace.upper[pi];
        Ok(Controller {
            model,
            task,
            cfg,
            index,
            scale: task.distance_scale(),
            powers,
            uniform,
            union_box,
            memory: None,
        })
    }

    /// Forget the previous plan.
    pub fn reset(&mut self) {
        self.memory = None;
    }

    pub fn num_samples(&self) -> usize {
        self.index.len()
    }

    /// Solve the finite-horizon problem at `x`.
    pub fn solve(&mut self, x: &[f64]) -> Result<StepSolution> {
        self.model
            .check_dims(x, &vec![0.0; self.model.input_dim()])?;
        let n_hor = self.cfg.horizon;
        if self.task.target_reached(x) {
            self.memory = None;
            return Ok(StepSolution {
                inputs: vec![vec![0.0; self.model.input_dim()]; n_hor],
                states: vec![x.to_vec()],
                terminal: TerminalChoice::Hold,
                cost: 0.0,
                objective: 0.0,
                solves: 0,
            });
        }
        let cands = self.candidates(x);
        let mut solves = 0;
        let mut start = 0;
        while start < cands.len() {
            let level = cands[start].cost;
            let mut end = start;
            while end < cands.len() && cands[end].cost == level {
                end += 1;
            }
            let group = &cands[start..end];
            let results = par::map(group, self.cfg.parallel, |c| self.evaluate(x, c));
            let mut best: Option<(usize, Plan)> = None;
            for (i, (plan, tries)) in results.into_iter().enumerate() {
                solves += tries;
                if let Some(p) = plan {
                    let better = match &best {
                        None => true,
                        Some((j, b)) => {
                            p.objective < b.objective
                                || (p.objective == b.objective && group[i].key < group[*j].key)
                        }
                    };
                    if better {
                        best = Some((i, p));
                    }
                }
            }
            if let Some((i, plan)) = best {
                let c = &group[i];
                let terminal = match c.term {
                    Term::Sample(s) => TerminalChoice::Stored {
                        iteration: self.index.iteration[s],
                        index: self.index.step[s],
                        cost_to_go: self.index.cost[s],
                    },
                    Term::Target(k) => TerminalChoice::Target { steps: k },
                };
                self.memory = Some(Memory {
                    term: c.term,
                    positions: plan.positions.clone(),
                    inputs: plan.inputs.clone(),
                });
                return Ok(StepSolution {
                    inputs: plan.inputs,
                    states: plan.states,
                    terminal,
                    cost: c.cost,
                    objective: plan.objective,
                    solves,
                });
            }
            start = end;
        }
        self.memory = None;
        Err(Error::ControllerFailure {
            step: 0,
            reason: format!(
                "all {} terminal candidates are infeasible ({solves} solves)",
                cands.len()
            ),
        })
    }

    fn candidates(&self, x: &[f64]) -> Vec<Cand> {
        let idx = &self.index;
        let n_hor = self.cfg.horizon;
        let p0 = self.task.position_of(x);
        let mut out: Vec<Cand> = Vec::new();
        let mut seen: HashSet<usize> = HashSet::new();
        let mut query: Option<usize> = None;

        // shifted previous plan
        if let Some(mem) = &self.memory {
            let mut positions: Vec<usize> = mem.positions[1..].to_vec();
            let mut warm: Vec<InputVec> = mem.inputs[1..].to_vec();
            match mem.term {
                Term::Sample(s) => {
                    if let Some(s2) = idx.next[s] {
                        positions.push(idx.position[s2]);
                        warm.push(idx.input(s).to_vec());
                        query = Some(s2);
                        seen.insert(s2);
                        out.push(self.sample_cand(s2, Some(positions), Some(warm)));
                    }
                }
                Term::Target(k) if k > 1 => out.push(Cand {
                    term: Term::Target(k - 1),
                    horizon: k - 1,
                    cost: (k - 1) as f64,
                    key: (usize::MAX, k - 1),
                    positions: Some(positions),
                    warm: Some(warm),
                }),
                Term::Target(_) => {}
            }
        }

        // stored states equal to x, replayed N steps
        for i in 0..idx.len() {
            if idx.state(i) != x {
                continue;
            }
            let mut s = i;
            let mut positions = Vec::with_capacity(n_hor);
            let mut warm = Vec::with_capacity(n_hor);
            let mut steps = 0;
            while steps < n_hor {
                let Some(nx) = idx.next[s] else { break };
                warm.push(idx.input(s).to_vec());
                s = nx;
                positions.push(idx.position[s]);
                steps += 1;
            }
            if steps == n_hor {
                if seen.insert(s) {
                    out.push(self.sample_cand(s, Some(positions), Some(warm)));
                }
                query.get_or_insert(s);
            } else if idx.in_target[s] && steps > 0 {
                out.push(Cand {
                    term: Term::Target(steps),
                    horizon: steps,
                    cost: steps as f64,
                    key: (usize::MAX, steps),
                    positions: Some(positions),
                    warm: Some(warm),
                });
            }
        }

        // nearest stored state to x, advanced N steps
        let query_state: Vec<f64> = match query {
            Some(q) => idx.state(q).to_vec(),
            None => {
                let mut best: Option<(f64, usize)> = None;
                for i in 0..idx.len() {
                    if idx.position[i] < p0 {
                        continue;
                    }
                    let d = self.dist(x, idx.state(i));
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, i));
                    }
                }
                match best {
                    Some((_, mut s)) => {
                        for _ in 0..n_hor {
                            match idx.next[s] {
                                Some(nx) => s = nx,
                                None => break,
                            }
                        }
                        idx.state(s).to_vec()
                    }
                    None => x.to_vec(),
                }
            }
        };

        let reach = self.reach_filter(x, n_hor);
        let mut scored: Vec<(f64, usize)> = (0..idx.len())
            .filter(|&i| idx.position[i] >= p0 && !seen.contains(&i) && reach(idx.state(i)))
            .map(|i| (self.dist(&query_state, idx.state(i)), i))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(idx.key(a.1).cmp(&idx.key(b.1))));
        let k = if self.cfg.exhaustive {
            scored.len()
        } else {
            self.cfg.candidates
        };
        for &(_, i) in scored.iter().take(k) {
            out.push(self.sample_cand(i, None, None));
        }

        // direct entry into the target set
        let tbox = self.terminal_target_box();
        for steps in 1..=n_hor {
            if out.iter().any(|c| c.term == Term::Target(steps)) {
                continue;
            }
            if self.target_reachable(x, steps, &tbox) {
                out.push(Cand {
                    term: Term::Target(steps),
                    horizon: steps,
                    cost: steps as f64,
                    key: (usize::MAX, steps),
                    positions: None,
                    warm: None,
                });
            }
        }

        out.sort_by(|a, b| a.cost.total_cmp(&b.cost).then(a.key.cmp(&b.key)));
        out
    }

    fn sample_cand(
        &self,
        s: usize,
        positions: Option<Vec<usize>>,
        warm: Option<Vec<InputVec>>,
    ) -> Cand {
        Cand {
            term: Term::Sample(s),
            horizon: self.cfg.horizon,
            cost: self.cfg.horizon as f64 + self.index.cost[s],
            key: self.index.key(s),
            positions,
            warm,
        }
    }

    fn dist(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut d = 0.0;
        for j in 0..a.len() {
            let t = (a[j] - b[j]) * self.scale[j];
            d += t * t;
        }
        d
    }

    fn terminal_target_box(&self) -> BoxSet {
        let mut b = self.task.terminal_box();
        for j in 0..b.dim() {
            if b.lower[j].is_finite()
                && b.upper[j].is_finite()
                && b.upper[j] - b.lower[j] > 4.0 * TARGET_MARGIN
            {
                b.lower[j] += TARGET_MARGIN;
                b.upper[j] -= TARGET_MARGIN;
            } else if b.lower[j].is_finite() && !b.upper[j].is_finite() {
                b.lower[j] += TARGET_MARGIN;
            }
        }
        b
    }

    /// Per-coordinate interval of states reachable in `n` steps, ignoring state constraints.
    fn reach_interval(&self, x: &[f64], n: usize) -> Option<(Vec<f64>, Vec<f64>)> {
        let (ap, apb) = self.powers.as_ref()?;
        let dim = x.len();
        let free = &ap[n] * DVector::from_column_slice(x);
        let (ulo, uhi) = (&self.task.input_box.lower, &self.task.input_box.upper);
        let mut lo = free.as_slice().to_vec();
        let mut hi = lo.clone();
        for s in 0..n {
            let g = &apb[n - 1 - s];
            for j in 0..dim {
                for i in 0..g.ncols() {
                    let (a, b) = (g[(j, i)] * ulo[i], g[(j, i)] * uhi[i]);
                    lo[j] += a.min(b);
                    hi[j] += a.max(b);
                }
            }
        }
        Some((lo, hi))
    }

    fn reach_filter(&self, x: &[f64], n: usize) -> impl Fn(&[f64]) -> bool + '_ {
        let interval = self.reach_interval(x, n);
        let pi = self.task.progress_index;
        let xp = x[pi];
        let max_prog = n as f64
            * self.model.dt
            * 3.0
            * self.task.state_box.upper[self.task.progress_rate_index]
                .abs()
                .max(1e-9);
        move |c: &[f64]| match &interval {
            Some((lo, hi)) => {
                (0..c.len()).all(|j| c[j] >= lo[j] - CONST_ROW_TOL && c[j] <= hi[j] + CONST_ROW_TOL)
            }
            None => c[pi] >= xp - CONST_ROW_TOL && c[pi] <= xp + max_prog,
        }
    }

    fn target_reachable(&self, x: &[f64], n: usize, tbox: &BoxSet) -> bool {
        match self.reach_interval(x, n) {
            Some((lo, hi)) => (0..lo.len()).all(|j| {
                hi[j] >= tbox.lower[j] - CONST_ROW_TOL && lo[j] <= tbox.upper[j] + CONST_ROW_TOL
            }),
            None => {
                let pi = self.task.progress_index;
                let max_prog = n as f64
                    * self.model.dt
                    * 3.0
                    * self.task.state_box.upper[self.task.progress_rate_index]
                        .abs()
                        .max(1e-9);
                x[pi] + max_prog >= tbox.lower[pi]
            }
        }
    }

    /// Solve one candidate; returns the plan (if feasible) and the number of subproblems tried.
    fn evaluate(&self, x: &[f64], c: &Cand) -> (Option<Plan>, usize) {
        let assignments = match &c.positions {
            Some(p) => vec![p.clone()],
            None => self.assignments(x, c),
        };
        let mut tries = 0;
        for positions in assignments {
            tries += 1;
            let plan = if self.powers.is_some() {
                self.solve_linear(x, c, &positions)
            } else {
                self.solve_sqp(x, c, &positions)
            };
            if plan.is_some() {
                return (plan, tries);
            }
        }
        (None, tries)
    }

    /// Subtask positions of `x_1..x_n`, nominal guess first.
    fn assignments(&self, x: &[f64], c: &Cand) -> Vec<Vec<usize>> {
        let n = c.horizon;
        let p0 = self.task.position_of(x);
        let last = self.task.len() - 1;
        let (pe, end_prog, end_rate) = match c.term {
            Term::Sample(s) => {
                let st = self.index.state(s);
                (
                    self.index.position[s],
                    st[self.task.progress_index],
                    st[self.task.progress_rate_index],
                )
            }
            Term::Target(_) => (
                last,
                self.task.subtasks[last].end,
                x[self.task.progress_rate_index],
            ),
        };
        if self.uniform || pe == p0 {
            return vec![vec![pe.max(p0); n]];
        }
        if pe < p0 {
            return Vec::new();
        }
        // cubic Hermite guess of the progress profile
        let dt = self.model.dt;
        let t_end = n as f64 * dt;
        let (q0, v0) = (
            x[self.task.progress_index],
            x[self.task.progress_rate_index],
        );
        let (q1, v1) = (end_prog, end_rate);
        let mut nominal = Vec::with_capacity(n);
        let mut prev = p0;
        for t in 1..=n {
            let s = t as f64 / n as f64;
            let (h00, h10, h01, h11) = (
                2.0 * s.powi(3) - 3.0 * s * s + 1.0,
                s.powi(3) - 2.0 * s * s + s,
                -2.0 * s.powi(3) + 3.0 * s * s,
                s.powi(3) - s * s,
            );
            let q = h00 * q0 + h10 * t_end * v0 + h01 * q1 + h11 * t_end * v1;
            let p = if t == n {
                pe
            } else {
                self.task.position_of_progress(q).clamp(prev, pe)
            };
            nominal.push(p);
            prev = p;
        }
        let mut out = vec![nominal.clone()];
        if pe == p0 + 1 {
            let tau = nominal.iter().position(|&p| p == pe).unwrap_or(n - 1) + 1;
            let mut alts: Vec<usize> = (1..=n).filter(|&t| t != tau).collect();
            alts.sort_by_key(|&t| {
                (t as isize - tau as isize).unsigned_abs() * 2 + usize::from(t < tau)
            });
            for t in alts.into_iter().take(MAX_ASSIGNMENTS - 1) {
                out.push((1..=n).map(|k| if k < t { p0 } else { pe }).collect());
            }
        }
        out
    }

    fn step_box(&self, p: usize) -> &BoxSet {
        if self.uniform {
            &self.union_box
        } else {
            &self.task.subtasks[p].workspace
        }
    }

    /// Assemble the condensed QP for the prediction `pred`.
    fn build_qp(
        &self,
        x: &[f64],
        c: &Cand,
        positions: &[usize],
        pred: &Affine,
        center: Option<&[f64]>,
        radius: f64,
    ) -> Option<QpProblem> {
        let n = c.horizon;
        let (nx, m) = (self.model.state_dim(), self.model.input_dim());
        let nv = n * m;
        let p0 = self.task.position_of(x);
        let tbox = match c.term {
            Term::Target(_) => Some(self.terminal_target_box()),
            Term::Sample(_) => None,
        };
        let mut rows: Vec<f64> = Vec::new();
        let mut rhs: Vec<f64> = Vec::new();
        for t in 1..=n {
            let bx = match (&tbox, t == n) {
                (_, false) => self.step_box(positions[t - 1]).clone(),
                (Some(tb), true) => tb.intersect(self.step_box(positions[t - 1])),
                (None, true) => continue,
            };
            let (d, g) = (&pred.d[t - 1], &pred.g[t - 1]);
            for j in 0..nx {
                let zero_row = (0..nv).all(|i| g[(j, i)] == 0.0);
                for (bound, sign) in [(bx.upper[j], 1.0), (bx.lower[j], -1.0)] {
                    if !bound.is_finite() {
                        continue;
                    }
                    let limit = sign * (bound - d[j]);
                    if zero_row {
                        if limit < -CONST_ROW_TOL {
                            return None;
                        }
                        continue;
                    }
                    rows.extend((0..nv).map(|i| sign * g[(j, i)]));
                    rhs.push(limit);
                }
            }
        }
        let mut lower = DVector::zeros(nv);
        let mut upper = DVector::zeros(nv);
        for s in 0..n {
            let p = if s == 0 { p0 } else { positions[s - 1] };
            let ib = &self.task.subtasks[p].inputs;
            for i in 0..m {
                let (mut lo, mut hi) = (ib.lower[i], ib.upper[i]);
                if let Some(cu) = center {
                    lo = lo.max(cu[s * m + i] - radius);
                    hi = hi.min(cu[s * m + i] + radius);
                }
                lower[s * m + i] = lo;
                upper[s * m + i] = hi.max(lo);
            }
        }
        // about a linearization point only the smallest correction is sought
        let linear = match center {
            Some(cu) => {
                DVector::from_iterator(nv, cu.iter().map(|v| -2.0 * self.cfg.regularizer * v))
            }
            None => DVector::zeros(nv),
        };
        let mut qp = QpProblem::new(nv)
            .with_objective(
                DMatrix::identity(nv, nv) * (2.0 * self.cfg.regularizer),
                linear,
            )
            .with_bounds(lower, upper);
        if !rhs.is_empty() {
            qp = qp.with_inequalities(
                DMatrix::from_row_slice(rhs.len(), nv, &rows),
                DVector::from_vec(rhs),
            );
        }
        if let Term::Sample(s) = c.term {
            let target = self.index.state(s);
            let (d, g) = (&pred.d[n - 1], &pred.g[n - 1]);
            let b = DVector::from_iterator(nx, (0..nx).map(|j| target[j] - d[j]));
            qp = qp.with_equalities(g.clone(), b);
        }
        Some(qp)
    }

    fn solve_linear(&self, x: &[f64], c: &Cand, positions: &[usize]) -> Option<Plan> {
        let (ap, apb) = self.powers.as_ref().unwrap();
        let n = c.horizon;
        let (nx, m) = (self.model.state_dim(), self.model.input_dim());
        let xv = DVector::from_column_slice(x);
        let mut pred = Affine {
            d: Vec::with_capacity(n),
            g: Vec::with_capacity(n),
        };
        for t in 1..=n {
            pred.d.push(&ap[t] * &xv);
            let mut g = DMatrix::zeros(nx, n * m);
            for s in 0..t {
                g.view_mut((0, s * m), (nx, m)).copy_from(&apb[t - 1 - s]);
            }
            pred.g.push(g);
        }
        let qp = self.build_qp(x, c, positions, &pred, None, f64::INFINITY)?;
        let warm = c
            .warm
            .as_ref()
            .map(|w| DVector::from_iterator(n * m, w.iter().flatten().cloned()));
        let sol = solve_qp_from(&qp, &self.cfg.solver, warm.as_ref()).ok()?;
        if !sol.is_optimal() {
            return None;
        }
        let inputs: Vec<InputVec> = (0..n)
            .map(|s| sol.x.as_slice()[s * m..(s + 1) * m].to_vec())
            .collect();
        let states = self.rollout(x, &inputs);
        Some(Plan {
            inputs,
            states,
            positions: positions.to_vec(),
            objective: sol.objective,
        })
    }

    fn rollout(&self, x: &[f64], inputs: &[InputVec]) -> Vec<StateVec> {
        let mut states = vec![x.to_vec()];
        for u in inputs {
            let next = self.model.step_unchecked(states.last().unwrap(), u);
            states.push(next);
        }
        states
    }

    /// Sequential linearization for nonlinear models.
    fn solve_sqp(&self, x: &[f64], c: &Cand, positions_hint: &[usize]) -> Option<Plan> {
        let n = c.horizon;
        let (nx, m) = (self.model.state_dim(), self.model.input_dim());
        let sqp = &self.cfg.sqp;
        let p0 = self.task.position_of(x);
        let clamp_all = |u: &[InputVec]| -> Vec<InputVec> {
            u.iter()
                .enumerate()
                .map(|(s, ui)| {
                    let p = if s == 0 {
                        p0
                    } else {
                        positions_hint.get(s - 1).copied().unwrap_or(p0)
                    };
                    self.task.subtasks[p].inputs.clamp(ui)
                })
                .collect()
        };
        let mut ubar: Vec<InputVec> = clamp_all(&self.initial_guess(c));
        let width: f64 = (0..m)
            .map(|i| self.task.input_box.upper[i] - self.task.input_box.lower[i])
            .fold(0.0, f64::max);
        let mut radius = width;
        let mut states = self.rollout(x, &ubar);
        let mut merit = self.merit(c, &states);
        let mut positions: Vec<usize> = positions_hint.to_vec();
        for _ in 0..sqp.max_iterations {
            let mut pred = Affine {
                d: Vec::with_capacity(n),
                g: Vec::with_capacity(n),
            };
            let mut g = DMatrix::<f64>::zeros(nx, n * m);
            let center: Vec<f64> = ubar.iter().flatten().cloned().collect();
            let uvec = DVector::from_column_slice(&center);
            for t in 0..n {
                let (a, b, _) = self.model.linearize(&states[t], &ubar[t]).ok()?;
                let mut gn = &a * &g;
                gn.view_mut((0, t * m), (nx, m)).copy_from(&b);
                g = gn;
                let d = DVector::from_column_slice(&states[t + 1]) - &g * &uvec;
                pred.d.push(d);
                pred.g.push(g.clone());
            }
            let qp = self.build_qp(x, c, &positions, &pred, Some(&center), radius);
            let qp = qp?;
            let sol = solve_qp_from(&qp, &self.cfg.solver, Some(&uvec)).ok()?;
            if !sol.is_optimal() {
                if radius >= width {
                    return None;
                }
                radius = (radius / sqp.trust_shrink).min(width);
                continue;
            }
            let cand: Vec<InputVec> = clamp_all(
                &(0..n)
                    .map(|s| sol.x.as_slice()[s * m..(s + 1) * m].to_vec())
                    .collect::<Vec<_>>(),
            );
            let change = cand
                .iter()
                .flatten()
                .zip(ubar.iter().flatten())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let new_states = self.rollout(x, &cand);
            let new_merit = self.merit(c, &new_states);
            if new_merit <= merit || new_merit <= sqp.terminal_tol {
                ubar = cand;
                states = new_states;
                merit = new_merit;
                if !self.uniform {
                    positions = states[1..]
                        .iter()
                        .map(|s| self.task.position_of(s))
                        .collect();
                }
                if change <= sqp.input_tol && merit <= sqp.terminal_tol {
                    break;
                }
            } else {
                radius = (change * sqp.trust_shrink).max(1e-9);
            }
            if merit <= sqp.terminal_tol && change <= sqp.input_tol {
                break;
            }
        }
        if merit > sqp.terminal_tol {
            return None;
        }
        let objective: f64 =
            self.cfg.regularizer * ubar.iter().flatten().map(|v| v * v).sum::<f64>();
        let positions: Vec<usize> = states[1..]
            .iter()
            .map(|s| self.task.position_of(s))
            .collect();
        Some(Plan {
            inputs: ubar,
            states,
            positions,
            objective,
        })
    }

    /// Terminal mismatch plus state-box violation of a simulated plan.
    fn merit(&self, c: &Cand, states: &[StateVec]) -> f64 {
        let n = states.len() - 1;
        let mut v = 0.0f64;
        for (t, s) in states.iter().enumerate().skip(1) {
            let bx = self.step_box(self.task.position_of(s));
            v = v.max(bx.violation(s));
            if t == n {
                match c.term {
                    Term::Sample(k) => {
                        let target = self.index.state(k);
                        for j in 0..s.len() {
                            v = v.max(((s[j] - target[j]) * self.scale[j]).abs());
                        }
                    }
                    Term::Target(_) => v = v.max(self.task.terminal_box().violation(s)),
                }
            }
        }
        v
    }

    fn initial_guess(&self, c: &Cand) -> Vec<InputVec> {
        let n = c.horizon;
        let m = self.model.input_dim();
        if let Some(w) = &c.warm {
            return w.clone();
        }
        if let Term::Sample(s) = c.term {
            let k = self.index.step[s];
            if k >= n {
                return (0..n)
                    .map(|t| self.index.input(s - n + t).to_vec())
                    .collect();
            }
        }
        if let Some(mem) = &self.memory {
            let mut w: Vec<InputVec> = mem.inputs.iter().skip(1).cloned().collect();
            w.resize(
                n,
                mem.inputs.last().cloned().unwrap_or_else(|| vec![0.0; m]),
            );
            w.truncate(n);
            return w;
        }
        vec![vec![0.0; m]; n]
    }
}

/// One finite-horizon solve without memory of a previous plan.
pub fn solve_step(
    model: &ModelSpec,
    task: &TaskSpec,
    store: &SafeSetStore,
    cfg: &IlmpcConfig,
    x: &[f64],
) -> Result<StepSolution> {
    Controller::new(model, task, store, cfg)?.solve(x)
}

/// Receding-horizon policy: the first planned input.
pub fn policy(
    model: &ModelSpec,
    task: &TaskSpec,
    store: &SafeSetStore,
    cfg: &IlmpcConfig,
    x: &[f64],
) -> Result<InputVec> {
    Ok(solve_step(model, task, store, cfg, x)?
        .inputs
        .swap_remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub k: usize,
    pub state: StateVec,
    pub input: InputVec,
    pub terminal: TerminalChoice,
    pub predicted_cost: f64,
    pub solves: usize,
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    pub trajectory: Trajectory,
    pub cost: f64,
    pub steps: Vec<StepLog>,
}

/// Run one closed-loop iteration from `x0` and record it on success.
pub fn run_iteration(
    model: &ModelSpec,
    task: &TaskSpec,
    store: &mut SafeSetStore,
    cfg: &IlmpcConfig,
    x0: &[f64],
) -> Result<IterationRecord> {
    let mut ctrl = Controller::new(model, task, store, cfg)?;
    let mut states = vec![x0.to_vec()];
    let mut inputs: Vec<InputVec> = Vec::new();
    let mut logs = Vec::new();
    let mut x = x0.to_vec();
    let fail = |reason: String, states: &[StateVec], inputs: &[InputVec]| {
        let mut u = inputs.to_vec();
        u.push(vec![0.0; model.input_dim()]);
        Error::IterationFailure {
            reason,
            trajectory: Box::new(Trajectory::from_rollout(task, states.to_vec(), u)),
        }
    };
    while !task.target_reached(&x) {
        let k = states.len() - 1;
        if k >= cfg.max_steps {
            return Err(fail(
                format!("target not reached within {} steps", cfg.max_steps),
                &states,
                &inputs,
            ));
        }
        let sol = match ctrl.solve(&x) {
            Ok(s) => s,
            Err(e) => return Err(fail(format!("step {k}: {e}"), &states, &inputs)),
        };
        let p = task.position_of(&x);
        let u = task.subtasks[p].inputs.clamp(&sol.inputs[0]);
        let next = model.step(&x, &u)?;
        logs.push(StepLog {
            k,
            state: x.clone(),
            input: u.clone(),
            terminal: sol.terminal,
            predicted_cost: sol.cost,
            solves: sol.solves,
        });
        inputs.push(u);
        states.push(next.clone());
        x = next;
    }
    inputs.push(vec![0.0; model.input_dim()]);
    let traj = Trajectory::from_rollout(task, states, inputs);
    let cost = traj.cost();
    let iteration = store.record_execution(model, task, traj.clone())?;
    let trajectory = store.executions[iteration].trajectory.clone();
    debug_assert_eq!(trajectory.states, traj.states);
    Ok(IterationRecord {
        iteration,
        trajectory,
        cost,
        steps: logs,
    })
}
