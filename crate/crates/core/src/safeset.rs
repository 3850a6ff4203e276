//! Sampled safe sets: recorded executions, their subtask segmentation,
//! realized cost-to-go, guard sets and nearest-candidate queries.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{InputVec, ModelSpec, StateVec};
use crate::error::{Error, Result};
use crate::task::{in_transition_set, TaskSpec};

/// Index range of one subtask execution inside a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub position: usize,
    pub subtask: usize,
    /// First and last (guard) state index, inclusive.
    pub first: usize,
    pub last: usize,
    /// Progress coordinate at which this subtask began in the recording task.
    pub start_progress: f64,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.last + 1 - self.first
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub states: Vec<StateVec>,
    /// One input per state; the last one keeps the state in the target set.
    pub inputs: Vec<InputVec>,
    pub stage_costs: Vec<f64>,
    #[serde(default)]
    pub segments: Vec<Segment>,
}

impl Trajectory {
    pub fn new(states: Vec<StateVec>, inputs: Vec<InputVec>, stage_costs: Vec<f64>) -> Self {
        Trajectory {
            states,
            inputs,
            stage_costs,
            segments: Vec::new(),
        }
    }

    /// Build from a rollout, evaluating stage costs against `task`.
    pub fn from_rollout(task: &TaskSpec, states: Vec<StateVec>, inputs: Vec<InputVec>) -> Self {
        let stage_costs = states
            .iter()
            .zip(&inputs)
            .map(|(x, u)| task.stage_cost(x, u))
            .collect();
        Trajectory::new(states, inputs, stage_costs)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Iteration cost: the sum of stage costs.
    pub fn cost(&self) -> f64 {
        self.stage_costs.iter().sum()
    }

    pub fn final_state(&self) -> &StateVec {
        self.states.last().expect("non-empty trajectory")
    }

    /// Largest box violation along the trajectory (states and inputs).
    pub fn max_violation(&self, task: &TaskSpec) -> f64 {
        let mut worst = 0.0f64;
        for (x, u) in self.states.iter().zip(&self.inputs) {
            let p = task.position_of(x);
            worst = worst.max(task.subtasks[p].workspace.violation(x));
            worst = worst.max(task.subtasks[p].inputs.violation(u));
        }
        worst
    }

    /// Split into subtask executions by scanning the progress coordinate.
    pub fn segmentation(&self, model: &ModelSpec, task: &TaskSpec) -> Result<Vec<Segment>> {
        if self.is_empty() {
            return Err(Error::Rejected("empty trajectory".into()));
        }
        let positions: Vec<usize> = self.states.iter().map(|x| task.position_of(x)).collect();
        let mut segments: Vec<Segment> = Vec::new();
        let mut first = 0;
        for k in 1..=positions.len() {
            if k < positions.len() && positions[k] == positions[first] {
                continue;
            }
            let p = positions[first];
            if k < positions.len() {
                if positions[k] != p + 1 {
                    return Err(Error::Rejected(format!(
                        "trajectory jumps from position {p} to {} at index {k}",
                        positions[k]
                    )));
                }
                let sub = &task.subtasks[p];
                let guard = &self.states[k - 1];
                if !sub.workspace.contains(guard)
                    || !in_transition_set(sub, guard, &task.subtasks[p + 1], model)?
                {
                    return Err(Error::Rejected(format!(
                        "segment {p} does not end in its transition set"
                    )));
                }
            }
            segments.push(Segment {
                position: p,
                subtask: task.order[p],
                first,
                last: k - 1,
                start_progress: task.subtasks[p].start,
            });
            first = k;
        }
        Ok(segments)
    }

    pub fn segment_at(&self, k: usize) -> Option<&Segment> {
        self.segments.iter().find(|s| s.first <= k && k <= s.last)
    }
}

/// Suffix sums of stage costs.
pub fn suffix_sums(stage_costs: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; stage_costs.len()];
    let mut acc = 0.0;
    for k in (0..stage_costs.len()).rev() {
        acc += stage_costs[k];
        v[k] = acc;
    }
    v
}

/// Where a decomposed execution came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Origin {
    /// Training execution whose subtask segment starts this trajectory.
    pub source: usize,
    /// Position in the new order where the trajectory starts.
    pub position: usize,
    /// Indices in the decomposed store of the downstream trajectories joined at each guard.
    pub relinked_to: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Execution {
    pub iteration: usize,
    pub label: String,
    /// Subtask order of the task this execution solves.
    pub order: Vec<usize>,
    pub trajectory: Trajectory,
    pub cost_to_go: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<Origin>,
}

impl Execution {
    pub fn cost(&self) -> f64 {
        self.cost_to_go.first().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StoreKind {
    /// Executions recorded by closed-loop runs, possibly over several orders.
    Recorded,
    /// Output of a decomposition for a single new order.
    Decomposed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafeSetStore {
    pub kind: StoreKind,
    pub executions: Vec<Execution>,
}

impl Default for SafeSetStore {
    fn default() -> Self {
        SafeSetStore {
            kind: StoreKind::Recorded,
            executions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuardMember {
    pub iteration: usize,
    pub index: usize,
    pub state: StateVec,
    pub input: InputVec,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GuardSet {
    pub subtask: usize,
    pub members: Vec<GuardMember>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub iteration: usize,
    pub index: usize,
    pub state: StateVec,
    pub cost_to_go: f64,
    pub distance: f64,
}

impl SafeSetStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.executions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.executions.is_empty()
    }

    pub fn num_states(&self) -> usize {
        self.executions.iter().map(|e| e.trajectory.len()).sum()
    }

    /// Validate, segment and append a successful execution of `task`.
    pub fn record_execution(
        &mut self,
        model: &ModelSpec,
        task: &TaskSpec,
        traj: Trajectory,
    ) -> Result<usize> {
        self.record_labeled(model, task, traj, "ilmpc")
    }

    pub fn record_labeled(
        &mut self,
        model: &ModelSpec,
        task: &TaskSpec,
        mut traj: Trajectory,
        label: &str,
    ) -> Result<usize> {
        if traj.is_empty()
            || traj.inputs.len() != traj.len()
            || traj.stage_costs.len() != traj.len()
        {
            return Err(Error::Rejected(
                "states, inputs and stage costs differ in length".into(),
            ));
        }
        let (n, m) = (model.state_dim(), model.input_dim());
        if traj.states.iter().any(|x| x.len() != n) || traj.inputs.iter().any(|u| u.len() != m) {
            return Err(Error::Rejected("state or input dimension mismatch".into()));
        }
        if traj
            .states
            .iter()
            .flatten()
            .chain(traj.inputs.iter().flatten())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Rejected("non-finite entries".into()));
        }
        if !task.target_reached(traj.final_state()) {
            return Err(Error::Rejected(
                "final state is outside the target set".into(),
            ));
        }
        traj.segments = traj.segmentation(model, task)?;
        if traj.segments.last().map(|s| s.position) != Some(task.len() - 1) {
            return Err(Error::Rejected(
                "trajectory does not end in the last subtask".into(),
            ));
        }
        let cost_to_go = suffix_sums(&traj.stage_costs);
        let iteration = self.executions.len();
        self.executions.push(Execution {
            iteration,
            label: label.to_string(),
            order: task.order.clone(),
            trajectory: traj,
            cost_to_go,
            origin: None,
        });
        Ok(iteration)
    }

    pub fn cost_to_go(&self, iteration: usize, k: usize) -> Result<f64> {
        self.executions
            .get(iteration)
            .and_then(|e| e.cost_to_go.get(k))
            .copied()
            .ok_or_else(|| Error::Lookup(format!("no stored state ({iteration}, {k})")))
    }

    /// Segment-final states of every stored execution of subtask `id`.
    pub fn guard_set(&self, subtask: usize) -> GuardSet {
        let mut members = Vec::new();
        for e in &self.executions {
            for seg in e
                .trajectory
                .segments
                .iter()
                .filter(|s| s.subtask == subtask)
            {
                members.push(GuardMember {
                    iteration: e.iteration,
                    index: seg.last,
                    state: e.trajectory.states[seg.last].clone(),
                    input: e.trajectory.inputs[seg.last].clone(),
                });
            }
        }
        GuardSet { subtask, members }
    }

    /// The `k` stored states closest to `x` under per-coordinate `scale`,
    /// ties broken by (iteration, index).
    pub fn terminal_candidates(&self, x: &[f64], k: usize, scale: &[f64]) -> Vec<Candidate> {
        let mut all: Vec<Candidate> = Vec::with_capacity(self.num_states());
        for e in &self.executions {
            for (i, s) in e.trajectory.states.iter().enumerate() {
                all.push(Candidate {
                    iteration: e.iteration,
                    index: i,
                    state: s.clone(),
                    cost_to_go: e.cost_to_go[i],
                    distance: scaled_distance(x, s, scale),
                });
            }
        }
        all.sort_by(|a, b| {
            a.distance
                .total_cmp(&b.distance)
                .then(a.iteration.cmp(&b.iteration))
                .then(a.index.cmp(&b.index))
        });
        all.truncate(k);
        all
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let store: SafeSetStore = serde_json::from_str(text)?;
        store.check_consistency()?;
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn check_consistency(&self) -> Result<()> {
        for (i, e) in self.executions.iter().enumerate() {
            let t = &e.trajectory;
            if e.iteration != i
                || t.is_empty()
                || t.inputs.len() != t.len()
                || t.stage_costs.len() != t.len()
                || e.cost_to_go.len() != t.len()
            {
                return Err(Error::Rejected(format!("execution {i} is malformed")));
            }
        }
        Ok(())
    }
}

pub fn scaled_distance(a: &[f64], b: &[f64], scale: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(scale)
        .map(|((x, y), s)| ((x - y) * s).powi(2))
        .sum::<f64>()
        .sqrt()
}
