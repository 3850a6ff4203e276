//! Tasks as ordered sequences of box-shaped subtasks sharing a progress
//! coordinate, with transition predicates and the minimum-time stage cost.

use crate::dynamics::ModelSpec;
use crate::error::{Error, Result};

/// Axis-aligned box; infinite bounds are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Contract("box bounds differ in length".into()));
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(l, u)| l.is_nan() || u.is_nan() || l > u)
        {
            return Err(Error::Contract(format!(
                "box bounds out of order: {lower:?} / {upper:?}"
            )));
        }
        Ok(BoxSet { lower, upper })
    }

    pub fn unbounded(dim: usize) -> Self {
        BoxSet {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    /// Largest amount by which `x` leaves the box (0 inside).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for (v, (l, u)) in x.iter().zip(self.lower.iter().zip(&self.upper)) {
            worst = worst.max(l - v).max(v - u);
        }
        worst
    }

    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| v.clamp(*l, *u))
            .collect()
    }

    pub fn intersect(&self, other: &BoxSet) -> BoxSet {
        BoxSet {
            lower: self
                .lower
                .iter()
                .zip(&other.lower)
                .map(|(a, b)| a.max(*b))
                .collect(),
            upper: self
                .upper
                .iter()
                .zip(&other.upper)
                .map(|(a, b)| a.min(*b))
                .collect(),
        }
    }

    pub fn is_subset_of(&self, other: &BoxSet) -> bool {
        (0..self.dim()).all(|i| self.lower[i] >= other.lower[i] && self.upper[i] <= other.upper[i])
    }

    pub fn is_empty(&self) -> bool {
        self.lower.iter().zip(&self.upper).any(|(l, u)| l > u)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubtaskSpec {
    /// Library id (track segment or obstacle index).
    pub id: usize,
    /// Workspace, including the progress interval `[start, end]`.
    pub workspace: BoxSet,
    pub inputs: BoxSet,
    pub progress_index: usize,
    pub start: f64,
    /// Transition threshold: the next subtask begins here.
    pub end: f64,
}

/// Minimum-time indicator cost: 0 inside the target set, 1 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCost {
    pub target: BoxSet,
}

impl StageCost {
    pub fn eval(&self, x: &[f64], _u: &[f64]) -> f64 {
        if self.target.contains(x) {
            0.0
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub order: Vec<usize>,
    /// Subtasks by position in `order`.
    pub subtasks: Vec<SubtaskSpec>,
    pub progress_index: usize,
    /// Coordinate approximating the progress rate, used to guess crossing times.
    pub progress_rate_index: usize,
    pub stage: StageCost,
    /// Bounding box of all workspaces; used for distance scaling.
    pub state_box: BoxSet,
    pub input_box: BoxSet,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.subtasks.is_empty() {
            return Err(Error::Contract("a task needs at least one subtask".into()));
        }
        if self.order.len() != self.subtasks.len() {
            return Err(Error::Contract(
                "order and subtasks disagree in length".into(),
            ));
        }
        for (p, sub) in self.subtasks.iter().enumerate() {
            if sub.id != self.order[p] {
                return Err(Error::Contract(format!(
                    "subtask at position {p} is not order[{p}]"
                )));
            }
            if sub.workspace.is_empty() || sub.inputs.is_empty() {
                return Err(Error::Contract(format!(
                    "subtask {} has an empty box",
                    sub.id
                )));
            }
            if !sub.inputs.is_subset_of(&self.input_box) {
                return Err(Error::Contract(format!(
                    "subtask {} input box exceeds the task box",
                    sub.id
                )));
            }
            if p > 0 && self.subtasks[p - 1].end != sub.start {
                return Err(Error::Contract(
                    "subtask progress intervals are not contiguous".into(),
                ));
            }
            if sub.start >= sub.end {
                return Err(Error::Contract("subtask progress interval is empty".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.subtasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subtasks.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_box.dim()
    }

    pub fn target(&self) -> &BoxSet {
        &self.stage.target
    }

    pub fn target_reached(&self, x: &[f64]) -> bool {
        self.stage.target.contains(x)
    }

    pub fn stage_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        self.stage.eval(x, u)
    }

    /// Position whose progress interval holds `x`; a state on a shared
    /// boundary belongs to the earlier subtask.
    pub fn position_of(&self, x: &[f64]) -> usize {
        self.position_of_progress(x[self.progress_index])
    }

    pub fn position_of_progress(&self, progress: f64) -> usize {
        let last = self.subtasks.len() - 1;
        self.subtasks[..last].partition_point(|s| s.end < progress)
    }

    pub fn position_of_subtask(&self, id: usize) -> Option<usize> {
        self.order.iter().position(|&l| l == id)
    }

    /// Start of the progress interval of position `p`.
    pub fn start_of(&self, p: usize) -> f64 {
        self.subtasks[p].start
    }

    /// Box violation of `x` against the workspace of its own position.
    pub fn violation(&self, x: &[f64]) -> f64 {
        self.subtasks[self.position_of(x)].workspace.violation(x)
    }

    /// Per-coordinate scaling (inverse box width) for distances between states.
    pub fn distance_scale(&self) -> Vec<f64> {
        (0..self.state_dim())
            .map(|i| {
                let w = self.state_box.upper[i] - self.state_box.lower[i];
                if w.is_finite() && w > 0.0 {
                    1.0 / w
                } else {
                    1.0
                }
            })
            .collect()
    }

    /// The terminal region used for planning: target set within the last workspace.
    pub fn terminal_box(&self) -> BoxSet {
        self.stage
            .target
            .intersect(&self.subtasks[self.len() - 1].workspace)
    }
}

pub fn in_workspace(sub: &SubtaskSpec, x: &[f64]) -> bool {
    sub.workspace.contains(x)
}

/// Whether some admissible input moves `x` across `sub`'s end into `next`.
/// Only the progress coordinate is checked, over the input-box corners.
pub fn in_transition_set(
    sub: &SubtaskSpec,
    x: &[f64],
    next: &SubtaskSpec,
    model: &ModelSpec,
) -> Result<bool> {
    model.check_dims(x, &sub.inputs.lower)?;
    if !in_workspace(sub, x) {
        return Err(Error::Contract(format!(
            "state {x:?} is outside subtask {}",
            sub.id
        )));
    }
    let (lo, hi) = (&sub.inputs.lower, &sub.inputs.upper);
    let m = lo.len();
    let mut best = f64::NEG_INFINITY;
    for mask in 0..(1usize << m) {
        let u: Vec<f64> = (0..m)
            .map(|i| {
                let b = if mask & (1 << i) != 0 { hi[i] } else { lo[i] };
                if b.is_finite() {
                    b
                } else {
                    0.0
                }
            })
            .collect();
        best = best.max(model.step_unchecked(x, &u)[sub.progress_index]);
    }
    Ok(best >= next.start)
}
