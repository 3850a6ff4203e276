//! The racing and robot-corridor experiments: geometry, task builders and
//! the baseline policies that seed the safe sets.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::dynamics::{BicycleParams, CurvatureProfile, InputVec, ModelSpec, StateVec};
use crate::error::{Error, Result};
use crate::safeset::Trajectory;
use crate::task::{BoxSet, StageCost, SubtaskSpec, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackSegment {
    /// Signed curvature (1/m); positive turns left.
    pub curvature: f64,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackSpec {
    pub segments: Vec<TrackSegment>,
    pub lane_width: f64,
    pub dt: f64,
    pub max_speed: f64,
    pub bicycle: BicycleParams,
}

impl Default for TrackSpec {
    fn default() -> Self {
        let seg = |curvature, length| TrackSegment { curvature, length };
        TrackSpec {
            segments: vec![
                seg(0.0, 2.0),
                seg(1.5, 1.5),
                seg(0.0, 1.5),
                seg(-1.5, 1.2),
                seg(0.0, 2.5),
                seg(1.5, 1.8),
                seg(0.0, 1.0),
                seg(-1.5, 1.5),
                seg(0.0, 2.0),
                seg(1.5, 1.0),
            ],
            lane_width: 0.8,
            dt: 0.1,
            max_speed: 3.0,
            bicycle: BicycleParams::default(),
        }
    }
}

impl TrackSpec {
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Config("track has no segments".into()));
        }
        if self
            .segments
            .iter()
            .any(|s| !(s.length > 0.0) || !s.curvature.is_finite())
        {
            return Err(Error::Config("track segments need positive length".into()));
        }
        if !(self.lane_width > 0.0) || !(self.max_speed > 0.0) {
            return Err(Error::Config(
                "lane width and speed limit must be positive".into(),
            ));
        }
        for s in &self.segments {
            if s.curvature.abs() * self.lane_width / 2.0 >= 1.0 {
                return Err(Error::Config(
                    "lane edge crosses the curvature center".into(),
                ));
            }
        }
        ModelSpec::bicycle(
            self.dt,
            self.bicycle.clone(),
            CurvatureProfile::constant(0.0),
        )
        .validate()
    }

    /// Cumulative segment boundaries `[s_0 = 0, s_1, ..., s_M]` for an order.
    pub fn boundaries(&self, order: &[usize]) -> Vec<f64> {
        cumulative(order.iter().map(|&l| self.segments[l].length))
    }

    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(|s| s.length).sum()
    }

    /// Centerline sampled every `ds` metres as `(s, x, y, curvature)`.
    pub fn centerline(&self, order: &[usize], ds: f64) -> Vec<[f64; 4]> {
        let bounds = self.boundaries(order);
        let total = *bounds.last().unwrap();
        let mut out = Vec::new();
        let (mut x, mut y, mut psi) = (0.0f64, 0.0f64, 0.0f64);
        let mut s = 0.0;
        let steps = (total / ds).ceil() as usize;
        for i in 0..=steps {
            let p = bounds[1..]
                .partition_point(|&b| b <= s)
                .min(order.len() - 1);
            let kappa = self.segments[order[p]].curvature;
            out.push([s, x, y, kappa]);
            if i == steps {
                break;
            }
            let h = ds.min(total - s);
            // exact arc integration at constant curvature
            if kappa.abs() < 1e-12 {
                x += h * psi.cos();
                y += h * psi.sin();
            } else {
                let psi2 = psi + kappa * h;
                x += (psi2.sin() - psi.sin()) / kappa;
                y -= (psi2.cos() - psi.cos()) / kappa;
                psi = psi2;
            }
            s += h;
        }
        out
    }
}

/// Centerline samples as CSV with columns `s,x,y,curvature`.
pub fn centerline_csv(spec: &TrackSpec, order: &[usize], ds: f64) -> String {
    let mut out = String::from("s,x,y,curvature\n");
    for [s, x, y, k] in spec.centerline(order, ds) {
        out.push_str(&format!("{s},{x},{y},{k}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    /// Angular extent of the obstacle (rad).
    pub span: f64,
    pub h_min: f64,
    pub h_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorridorSpec {
    pub obstacles: Vec<Obstacle>,
    pub dt: f64,
}

impl Default for CorridorSpec {
    fn default() -> Self {
        let ob = |span, h_min, h_max| Obstacle { span, h_min, h_max };
        CorridorSpec {
            obstacles: vec![
                ob(0.6, 0.20, 0.50),
                ob(0.5, 0.15, 0.55),
                ob(0.7, 0.25, 0.45),
                ob(0.5, 0.10, 0.60),
                ob(0.6, 0.20, 0.50),
                ob(0.5, 0.22, 0.48),
            ],
            dt: 0.01,
        }
    }
}

impl CorridorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.obstacles.is_empty() {
            return Err(Error::Config("corridor has no obstacles".into()));
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.span > 0.0) {
                return Err(Error::Config(format!("obstacle {i} has non-positive span")));
            }
            if !(o.h_min < o.h_max) {
                return Err(Error::Config(format!(
                    "obstacle {i} leaves an empty height window"
                )));
            }
        }
        ModelSpec::integrator(self.dt).validate()
    }

    pub fn boundaries(&self, order: &[usize]) -> Vec<f64> {
        cumulative(order.iter().map(|&l| self.obstacles[l].span))
    }

    pub fn center(&self, id: usize) -> f64 {
        0.5 * (self.obstacles[id].h_min + self.obstacles[id].h_max)
    }

    /// Start state: at rest at the first obstacle's center height.
    pub fn initial_state(&self, order: &[usize]) -> StateVec {
        vec![0.0, 0.0, self.center(order[0]), 0.0]
    }
}

fn cumulative(lengths: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out = vec![0.0];
    let mut acc = 0.0;
    for l in lengths {
        acc += l;
        out.push(acc);
    }
    out
}

pub fn check_permutation(order: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if order.len() != n {
        return Err(Error::Contract(format!(
            "order {order:?} is not a permutation of 0..{n}"
        )));
    }
    for &l in order {
        if l >= n || seen[l] {
            return Err(Error::Contract(format!(
                "order {order:?} is not a permutation of 0..{n}"
            )));
        }
        seen[l] = true;
    }
    Ok(())
}

pub fn build_robot_task(spec: &CorridorSpec, order: &[usize]) -> Result<(TaskSpec, ModelSpec)> {
    spec.validate()?;
    check_permutation(order, spec.obstacles.len())?;
    let theta = spec.boundaries(order);
    let m = order.len();
    // one step of maximum progress past the final boundary
    let eps = spec.dt * PI;
    let inputs = BoxSet::new(vec![-PI, -0.6], vec![PI, 0.6])?;
    let mut subtasks = Vec::with_capacity(m);
    for (p, &l) in order.iter().enumerate() {
        let o = &spec.obstacles[l];
        let end = if p + 1 == m {
            theta[p + 1] + eps
        } else {
            theta[p + 1]
        };
        subtasks.push(SubtaskSpec {
            id: l,
            workspace: BoxSet::new(
                vec![theta[p], -PI, o.h_min, -1.0],
                vec![end, PI, o.h_max, 1.0],
            )?,
            inputs: inputs.clone(),
            progress_index: 0,
            start: theta[p],
            end: theta[p + 1],
        });
    }
    let last = &spec.obstacles[order[m - 1]];
    let inf = f64::INFINITY;
    let target = BoxSet::new(
        vec![theta[m], -inf, last.h_min, -inf],
        vec![theta[m] + eps, inf, last.h_max, inf],
    )?;
    let h_lo = spec.obstacles.iter().map(|o| o.h_min).fold(inf, f64::min);
    let h_hi = spec.obstacles.iter().map(|o| o.h_max).fold(-inf, f64::max);
    let task = TaskSpec {
        order: order.to_vec(),
        subtasks,
        progress_index: 0,
        progress_rate_index: 1,
        stage: StageCost { target },
        state_box: BoxSet::new(
            vec![0.0, -PI, h_lo, -1.0],
            vec![theta[m] + eps, PI, h_hi, 1.0],
        )?,
        input_box: inputs,
    };
    task.validate()?;
    Ok((task, ModelSpec::integrator(spec.dt)))
}

pub fn build_racing_task(spec: &TrackSpec, order: &[usize]) -> Result<(TaskSpec, ModelSpec)> {
    spec.validate()?;
    check_permutation(order, spec.segments.len())?;
    let s = spec.boundaries(order);
    let m = order.len();
    let eps = spec.max_speed * spec.dt;
    let half = spec.lane_width / 2.0;
    let inf = f64::INFINITY;
    let inputs = BoxSet::new(vec![-1.0, -0.5], vec![1.0, 0.5])?;
    let mut subtasks = Vec::with_capacity(m);
    for (p, &l) in order.iter().enumerate() {
        let end = if p + 1 == m { s[p + 1] + eps } else { s[p + 1] };
        subtasks.push(SubtaskSpec {
            id: l,
            workspace: BoxSet::new(
                vec![0.0, -inf, -inf, -FRAC_PI_2, s[p], -half],
                vec![spec.max_speed, inf, inf, FRAC_PI_2, end, half],
            )?,
            inputs: inputs.clone(),
            progress_index: 4,
            start: s[p],
            end: s[p + 1],
        });
    }
    let mut lower = vec![-inf; 6];
    lower[4] = s[m];
    let target = BoxSet::new(lower, vec![inf; 6])?;
    let task = TaskSpec {
        order: order.to_vec(),
        subtasks,
        progress_index: 4,
        progress_rate_index: 0,
        stage: StageCost { target },
        state_box: BoxSet::new(
            vec![0.0, -inf, -inf, -FRAC_PI_2, 0.0, -half],
            vec![spec.max_speed, inf, inf, FRAC_PI_2, s[m] + eps, half],
        )?,
        input_box: inputs,
    };
    task.validate()?;
    let curvature = CurvatureProfile {
        starts: s[..m].to_vec(),
        values: order.iter().map(|&l| spec.segments[l].curvature).collect(),
    };
    Ok((
        task,
        ModelSpec::bicycle(spec.dt, spec.bicycle.clone(), curvature),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum BaselinePolicy {
    /// Constant joint speed while a PD loop tracks the current mode's center height.
    CenterHeight {
        speed: f64,
        k_speed: f64,
        kp: f64,
        kd: f64,
        /// Center height of each obstacle, by library id.
        centers: Vec<f64>,
    },
    /// Speed loop plus a PID on the lateral error with curvature feed-forward.
    CenterlinePid {
        speed: f64,
        k_speed: f64,
        kp: f64,
        ki: f64,
        kd: f64,
        wheelbase: f64,
    },
}

impl BaselinePolicy {
    pub fn robot_default(spec: &CorridorSpec) -> Self {
        BaselinePolicy::CenterHeight {
            speed: 0.8,
            k_speed: 50.0,
            kp: 20.0,
            kd: 9.0,
            centers: (0..spec.obstacles.len()).map(|i| spec.center(i)).collect(),
        }
    }

    pub fn racing_default(spec: &TrackSpec) -> Self {
        BaselinePolicy::CenterlinePid {
            speed: 0.7,
            k_speed: 2.0,
            kp: 1.5,
            ki: 0.1,
            kd: 1.2,
            wheelbase: spec.bicycle.lf + spec.bicycle.lr,
        }
    }
}

/// Closed-loop rollout of the baseline until the target is reached.
pub fn run_baseline(
    policy: &BaselinePolicy,
    task: &TaskSpec,
    model: &ModelSpec,
    x0: &[f64],
) -> Result<Trajectory> {
    const MAX_STEPS: usize = 100_000;
    const TOL: f64 = 1e-9;
    let mut states: Vec<StateVec> = vec![x0.to_vec()];
    let mut inputs: Vec<InputVec> = Vec::new();
    let mut integral = 0.0;
    let mut x = x0.to_vec();
    if task.violation(&x) > TOL {
        return Err(Error::BaselineInfeasible(format!(
            "initial state {x:?} violates its workspace"
        )));
    }
    while !task.target_reached(&x) {
        if states.len() > MAX_STEPS {
            return Err(Error::BaselineInfeasible(
                "baseline did not reach the target".into(),
            ));
        }
        let p = task.position_of(&x);
        let sub = &task.subtasks[p];
        let raw = match policy {
            BaselinePolicy::CenterHeight {
                speed,
                k_speed,
                kp,
                kd,
                centers,
            } => {
                let c = centers[sub.id];
                vec![k_speed * (speed - x[1]), kp * (c - x[2]) - kd * x[3]]
            }
            BaselinePolicy::CenterlinePid {
                speed,
                k_speed,
                kp,
                ki,
                kd,
                wheelbase,
            } => {
                let kappa = match &model.model {
                    crate::dynamics::ModelKind::Bicycle { curvature, .. } => curvature.lookup(x[4]),
                    _ => 0.0,
                };
                integral += x[5] * model.dt;
                let ey_rate = x[0] * x[3].sin() + x[1] * x[3].cos();
                vec![
                    k_speed * (speed - x[0]),
                    wheelbase * kappa - kp * x[5] - ki * integral - kd * ey_rate,
                ]
            }
        };
        let u = sub.inputs.clamp(&raw);
        let next = model.step(&x, &u)?;
        inputs.push(u);
        let viol = task.violation(&next);
        if viol > TOL {
            return Err(Error::BaselineInfeasible(format!(
                "baseline leaves the workspace by {viol:.3e} at step {}",
                states.len()
            )));
        }
        states.push(next.clone());
        x = next;
    }
    inputs.push(vec![0.0; model.input_dim()]);
    Ok(Trajectory::from_rollout(task, states, inputs))
}

/// Default robot start state for an order.
pub fn robot_initial_state(spec: &CorridorSpec, order: &[usize]) -> StateVec {
    spec.initial_state(order)
}

/// Racing start: standstill on the centerline at the start line.
pub fn racing_initial_state() -> StateVec {
    vec![0.0; 6]
}
