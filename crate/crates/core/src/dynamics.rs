//! Discrete-time system models: the robot quadruple integrator and a
//! curvilinear dynamic bicycle, plus central-difference linearization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type StateVec = Vec<f64>;
pub type InputVec = Vec<f64>;

/// Piecewise-constant curvature over the track abscissa.
///
/// Segment `i` covers `[starts[i], starts[i + 1])`; abscissae before the first
/// start use the first value and those past the last start use the last value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvatureProfile {
    pub starts: Vec<f64>,
    pub values: Vec<f64>,
}

impl CurvatureProfile {
    pub fn constant(value: f64) -> Self {
        CurvatureProfile {
            starts: vec![0.0],
            values: vec![value],
        }
    }

    pub fn lookup(&self, s: f64) -> f64 {
        let idx = self.starts.partition_point(|&b| b <= s);
        self.values[idx.saturating_sub(1)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BicycleParams {
    pub mass: f64,
    pub inertia: f64,
    /// Distance from the center of mass to the front axle.
    pub lf: f64,
    pub lr: f64,
    /// Linear cornering stiffness, front and rear (N/rad).
    pub cf: f64,
    pub cr: f64,
    /// Euler sub-steps per sampling interval.
    pub substeps: usize,
    /// Lower clamp on `v_x` inside the slip-angle formula.
    pub vx_floor: f64,
}

impl Default for BicycleParams {
    fn default() -> Self {
        BicycleParams {
            mass: 2.0,
            inertia: 0.03,
            lf: 0.125,
            lr: 0.125,
            cf: 40.0,
            cr: 40.0,
            substeps: 20,
            vx_floor: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ModelKind {
    /// `[q0, dq0, z, dz]` driven by `[ddq0, ddz]`.
    Integrator,
    /// `[vx, vy, wz, epsi, s, ey]` driven by `[a, delta]`.
    Bicycle {
        params: BicycleParams,
        curvature: CurvatureProfile,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub dt: f64,
    pub model: ModelKind,
}

impl ModelSpec {
    pub fn integrator(dt: f64) -> Self {
        ModelSpec {
            dt,
            model: ModelKind::Integrator,
        }
    }

    pub fn bicycle(dt: f64, params: BicycleParams, curvature: CurvatureProfile) -> Self {
        ModelSpec {
            dt,
            model: ModelKind::Bicycle { params, curvature },
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.model {
            ModelKind::Integrator => 4,
            ModelKind::Bicycle { .. } => 6,
        }
    }

    pub fn input_dim(&self) -> usize {
        2
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.model, ModelKind::Integrator)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Contract(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if let ModelKind::Bicycle { params, curvature } = &self.model {
            let p = params;
            let positive = [p.mass, p.inertia, p.lf, p.lr, p.cf, p.cr, p.vx_floor];
            if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || p.substeps == 0 {
                return Err(Error::Contract(
                    "bicycle parameters must be positive".into(),
                ));
            }
            if curvature.starts.is_empty() || curvature.starts.len() != curvature.values.len() {
                return Err(Error::Contract("curvature profile is malformed".into()));
            }
            if curvature.starts.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Contract(
                    "curvature breakpoints must increase".into(),
                ));
            }
        }
        Ok(())
    }

    /// `(A, B)` of `x+ = A x + B u` for linear models.
    pub fn linear_matrices(&self) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        match self.model {
            ModelKind::Integrator => {
                let dt = self.dt;
                let a = DMatrix::from_row_slice(
                    4,
                    4,
                    &[
                        1.0, dt, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, dt, 0.0, 0.0, 0.0,
                        1.0,
                    ],
                );
                let b = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, dt, 0.0, 0.0, 0.0, 0.0, dt]);
                Some((a, b))
            }
            ModelKind::Bicycle { .. } => None,
        }
    }

    /// Successor state.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<StateVec> {
        self.check_dims(x, u)?;
        Ok(self.step_unchecked(x, u))
    }

    pub(crate) fn check_dims(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() || u.len() != self.input_dim() {
            return Err(Error::Contract(format!(
                "expected state/input dims {}/{}, got {}/{}",
                self.state_dim(),
                self.input_dim(),
                x.len(),
                u.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn step_unchecked(&self, x: &[f64], u: &[f64]) -> StateVec {
        match &self.model {
            ModelKind::Integrator => {
                let dt = self.dt;
                vec![
                    x[0] + dt * x[1],
                    x[1] + dt * u[0],
                    x[2] + dt * x[3],
                    x[3] + dt * u[1],
                ]
            }
            ModelKind::Bicycle { params, curvature } => {
                let h = self.dt / params.substeps as f64;
                let mut s = [x[0], x[1], x[2], x[3], x[4], x[5]];
                for _ in 0..params.substeps {
                    let d = bicycle_rhs(params, curvature, &s, u);
                    for i in 0..6 {
                        s[i] += h * d[i];
                    }
                }
                s.to_vec()
            }
        }
    }

    /// Central-difference linearization: `step(x, u) ~ A x + B u + c`.
    pub fn linearize(
        &self,
        x: &[f64],
        u: &[f64],
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
        self.linearize_with_step(x, u, 1e-5)
    }

    /// As [`ModelSpec::linearize`] with a custom relative perturbation.
    pub fn linearize_with_step(
        &self,
        x: &[f64],
        u: &[f64],
        rel_step: f64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
        self.check_dims(x, u)?;
        let (n, m) = (self.state_dim(), self.input_dim());
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, m);
        let mut xp = x.to_vec();
        for j in 0..n {
            let h = rel_step * x[j].abs().max(1.0);
            xp[j] = x[j] + h;
            let fp = self.step_unchecked(&xp, u);
            xp[j] = x[j] - h;
            let fm = self.step_unchecked(&xp, u);
            xp[j] = x[j];
            for i in 0..n {
                a[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let mut up = u.to_vec();
        for j in 0..m {
            let h = rel_step * u[j].abs().max(1.0);
            up[j] = u[j] + h;
            let fp = self.step_unchecked(x, &up);
            up[j] = u[j] - h;
            let fm = self.step_unchecked(x, &up);
            up[j] = u[j];
            for i in 0..n {
                b[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let f0 = DVector::from_vec(self.step_unchecked(x, u));
        let c = f0 - &a * DVector::from_column_slice(x) - &b * DVector::from_column_slice(u);
        if a.iter()
            .chain(b.iter())
            .chain(c.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Linearization(format!(
                "non-finite derivative at x={x:?}, u={u:?}"
            )));
        }
        Ok((a, b, c))
    }
}

fn bicycle_rhs(
    p: &BicycleParams,
    curvature: &CurvatureProfile,
    x: &[f64; 6],
    u: &[f64],
) -> [f64; 6] {
    let [vx, vy, wz, epsi, s, ey] = *x;
    let (a, delta) = (u[0], u[1]);
    let vx_eff = vx.max(p.vx_floor);
    let alpha_f = delta - ((vy + p.lf * wz) / vx_eff).atan();
    let alpha_r = -((vy - p.lr * wz) / vx_eff).atan();
    let fyf = p.cf * alpha_f;
    let fyr = p.cr * alpha_r;
    let kappa = curvature.lookup(s);
    let s_dot = (vx * epsi.cos() - vy * epsi.sin()) / (1.0 - kappa * ey);
    [
        a - fyf * delta.sin() / p.mass + wz * vy,
        (fyf * delta.cos() + fyr) / p.mass - wz * vx,
        (p.lf * fyf * delta.cos() - p.lr * fyr) / p.inertia,
        wz - kappa * s_dot,
        s_dot,
        vx * epsi.sin() + vy * epsi.cos(),
    ]
}
