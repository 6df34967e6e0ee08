//! Receding-horizon optimal control problem and its multiple-shooting
//! transcription.
//!
//! The decision vector stacks all controls first and then all predicted
//! states, `z = [u_0 .. u_{N-1}, ξ_1 .. ξ_N]`, so its length is `3N + 8N`.
//! The measured initial state `ξ_0` is substituted rather than optimized.
//! Dynamics enter as defect equalities `ξ_{k+1} - step(ξ_k, u_k) = 0`, where
//! `step` is one forward-Euler step of the combined arm/slosh model.
//!
//! The cost charges tracking error and slosh angle on stages `1..=N` and
//! joint acceleration on stages `0..N`:
//!
//! ```text
//! J = Σ_{k=0}^{N-1} ‖e_{k+1}‖²_Q1 + Q2 β_{k+1}² + ‖u_k‖²_R
//! ```

use std::time::Duration;

use log::warn;
use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    euler_step_unchecked, euler_step_with_jacobians, CombinedState, ControlInput, LiquidParams, CONTROL_DIM, STATE_DIM,
};
use crate::error::OcpError;
use crate::kinematics::{forward_kinematics, jacobian, Pose2D, RobotParams};

/// Objective weights: diagonal `Q1` on `(x, z, θ)` error, scalar `Q2` on the
/// slosh angle and diagonal `R` on joint accelerations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub q1: [f64; 3],
    pub q2: f64,
    pub r: [f64; 3],
}

impl Weights {
    /// High tracking, little regard for the liquid.
    pub const P1: Weights = Weights {
        q1: [500.0, 500.0, 100.0],
        q2: 0.1,
        r: [0.01, 0.01, 0.01],
    };

    /// Anti-slosh: tracking is traded for a calm surface.
    pub const P2: Weights = Weights {
        q1: [100.0, 100.0, 1.0],
        q2: 1000.0,
        r: [0.01, 0.01, 0.01],
    };

    pub fn validate(&self) -> Result<(), OcpError> {
        let all = self.q1.iter().chain(self.r.iter()).chain(std::iter::once(&self.q2));
        for &w in all {
            if !(w.is_finite() && w >= 0.0) {
                return Err(OcpError::InvalidWeights("weights must be finite and non-negative"));
            }
        }
        if self.q1.iter().all(|&w| w == 0.0) && self.q2 == 0.0 {
            return Err(OcpError::InvalidWeights(
                "at least one of the tracking or slosh weights must be positive",
            ));
        }
        Ok(())
    }
}

/// Look up a named weight preset (`P1` or `P2`, case-insensitive).
pub fn preset(name: &str) -> Result<Weights, OcpError> {
    match name.trim().to_ascii_uppercase().as_str() {
        "P1" => Ok(Weights::P1),
        "P2" => Ok(Weights::P2),
        _ => Err(OcpError::UnknownPreset(name.to_string())),
    }
}

/// Box limits on joint angles, joint velocities and joint accelerations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub q_min: [f64; 3],
    pub q_max: [f64; 3],
    pub qdot_min: [f64; 3],
    pub qdot_max: [f64; 3],
    pub u_min: [f64; 3],
    pub u_max: [f64; 3],
}

impl Default for Bounds {
    fn default() -> Self {
        use std::f64::consts::PI;
        Self {
            q_min: [-2.0 * PI; 3],
            q_max: [2.0 * PI; 3],
            qdot_min: [-PI; 3],
            qdot_max: [PI; 3],
            u_min: [-8.0; 3],
            u_max: [8.0; 3],
        }
    }
}

impl Bounds {
    pub fn validate(&self) -> Result<(), OcpError> {
        let pairs = [
            ("q", &self.q_min, &self.q_max),
            ("qdot", &self.qdot_min, &self.qdot_max),
            ("u", &self.u_min, &self.u_max),
        ];
        for (what, lo, hi) in pairs {
            for i in 0..3 {
                if !(lo[i] < hi[i]) {
                    return Err(OcpError::InvertedBounds {
                        what,
                        index: i,
                        min: lo[i],
                        max: hi[i],
                    });
                }
            }
        }
        Ok(())
    }

    /// Box for one predicted state; the slosh coordinates are free.
    pub fn state_box(&self) -> ([f64; STATE_DIM], [f64; STATE_DIM]) {
        let mut lo = [f64::NEG_INFINITY; STATE_DIM];
        let mut hi = [f64::INFINITY; STATE_DIM];
        lo[..3].copy_from_slice(&self.q_min);
        hi[..3].copy_from_slice(&self.q_max);
        lo[3..6].copy_from_slice(&self.qdot_min);
        hi[3..6].copy_from_slice(&self.qdot_max);
        (lo, hi)
    }

    pub fn clamp_control(&self, u: &ControlInput) -> ControlInput {
        Vector3::from_fn(|i, _| u[i].clamp(self.u_min[i], self.u_max[i]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonConfig {
    /// Number of stages.
    pub n: usize,
    /// Stage length, seconds.
    pub dt: f64,
}

impl Default for HorizonConfig {
    /// One second of lookahead at 30 Hz.
    fn default() -> Self {
        Self { n: 30, dt: 1.0 / 30.0 }
    }
}

impl HorizonConfig {
    pub fn validate(&self) -> Result<(), OcpError> {
        if self.n < 1 {
            return Err(OcpError::InvalidHorizon("at least one stage is required"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(OcpError::InvalidHorizon("stage length must be positive"));
        }
        Ok(())
    }
}

/// One reference pose per predicted stage `k = 1..=N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    pub poses: Vec<Pose2D>,
}

impl ReferenceTrajectory {
    pub fn constant(pose: Pose2D, n: usize) -> Self {
        Self { poses: vec![pose; n] }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Index arithmetic for `z = [u_0 .. u_{N-1}, ξ_1 .. ξ_N]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
}

impl Layout {
    pub fn dim(&self) -> usize {
        (CONTROL_DIM + STATE_DIM) * self.n
    }

    pub fn num_defects(&self) -> usize {
        STATE_DIM * self.n
    }

    /// Offset of `u_k`, `k` in `0..N`.
    pub fn control(&self, k: usize) -> usize {
        CONTROL_DIM * k
    }

    /// Offset of `ξ_{k+1}`, `k` in `0..N`.
    pub fn state(&self, k: usize) -> usize {
        CONTROL_DIM * self.n + STATE_DIM * k
    }

    pub fn split(&self, z: &[f64]) -> (Vec<ControlInput>, Vec<CombinedState>) {
        let controls = (0..self.n)
            .map(|k| {
                let o = self.control(k);
                Vector3::new(z[o], z[o + 1], z[o + 2])
            })
            .collect();
        let states = (0..self.n)
            .map(|k| CombinedState::from_slice(&z[self.state(k)..self.state(k) + STATE_DIM]))
            .collect();
        (controls, states)
    }

    pub fn join(&self, controls: &[ControlInput], states: &[CombinedState]) -> Vec<f64> {
        let mut z = vec![0.0; self.dim()];
        for (k, u) in controls.iter().enumerate() {
            let o = self.control(k);
            z[o..o + CONTROL_DIM].copy_from_slice(u.as_slice());
        }
        for (k, x) in states.iter().enumerate() {
            let o = self.state(k);
            x.write_to(&mut z[o..o + STATE_DIM]);
        }
        z
    }
}

/// A fully specified receding-horizon solve.
#[derive(Debug, Clone)]
pub struct OcpProblem {
    pub initial_state: CombinedState,
    pub reference: ReferenceTrajectory,
    pub weights: Weights,
    pub bounds: Bounds,
    pub horizon: HorizonConfig,
    pub robot: RobotParams,
    pub liquid: LiquidParams,
    pub layout: Layout,
    /// Set when the supplied initial state violated the state box and was
    /// projected onto it.
    pub initial_state_clamped: bool,
}

impl OcpProblem {
    /// Lower and upper bounds of the decision vector.
    pub fn decision_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let dim = self.layout.dim();
        let mut lo = vec![0.0; dim];
        let mut hi = vec![0.0; dim];
        let (slo, shi) = self.bounds.state_box();
        for k in 0..self.layout.n {
            let c = self.layout.control(k);
            lo[c..c + 3].copy_from_slice(&self.bounds.u_min);
            hi[c..c + 3].copy_from_slice(&self.bounds.u_max);
            let s = self.layout.state(k);
            lo[s..s + STATE_DIM].copy_from_slice(&slo);
            hi[s..s + STATE_DIM].copy_from_slice(&shi);
        }
        (lo, hi)
    }

    fn check_dim(&self, z: &[f64]) -> Result<(), OcpError> {
        if z.len() != self.layout.dim() {
            return Err(OcpError::LengthMismatch {
                what: "decision vector",
                expected: self.layout.dim(),
                actual: z.len(),
            });
        }
        Ok(())
    }

    /// Decision vector obtained by rolling the Euler model out from the
    /// initial state under `controls`; its defects are exactly zero.
    pub fn rollout(&self, controls: &[ControlInput]) -> Vec<f64> {
        let mut states = Vec::with_capacity(controls.len());
        let mut x = self.initial_state;
        for u in controls {
            x = euler_step_unchecked(&x, u, self.horizon.dt, &self.robot, &self.liquid);
            states.push(x);
        }
        self.layout.join(controls, &states)
    }
}

/// Outcome of one solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    InfeasibleBounds,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIter => "max_iter",
            SolveStatus::InfeasibleBounds => "infeasible_bounds",
        }
    }
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub controls: Vec<ControlInput>,
    pub states: Vec<CombinedState>,
    pub objective: f64,
    pub status: SolveStatus,
    /// Outer (multiplier) iterations.
    pub iterations: usize,
    /// Total inner iterations over all outer iterations.
    pub inner_iterations: usize,
    /// ∞-norm of the dynamics defects.
    pub max_defect: f64,
    pub solve_time: Duration,
    /// Estimates of the defect multipliers, one per defect row.
    pub multipliers: Vec<f64>,
    /// Penalty parameter in force at termination.
    pub penalty: f64,
}

impl OcpSolution {
    pub fn decision_vector(&self) -> Vec<f64> {
        Layout { n: self.controls.len() }.join(&self.controls, &self.states)
    }
}

/// Initial point for a solve, optionally with multiplier and penalty
/// estimates carried over from a previous solve.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub z: Vec<f64>,
    pub multipliers: Option<Vec<f64>>,
    pub penalty: Option<f64>,
}

impl WarmStart {
    pub fn primal(z: Vec<f64>) -> Self {
        Self {
            z,
            multipliers: None,
            penalty: None,
        }
    }

    /// Keep the decision vector of a previous solution unchanged, along with
    /// its multipliers.
    pub fn from_solution(solution: &OcpSolution) -> Self {
        Self {
            z: solution.decision_vector(),
            multipliers: Some(solution.multipliers.clone()),
            penalty: Some(solution.penalty),
        }
    }
}

/// Componentwise `pose - reference`; the angle is a plain difference.
pub fn tracking_error(pose: &Pose2D, reference: &Pose2D) -> Vector3<f64> {
    pose.as_vector() - reference.as_vector()
}

/// Objective value for predicted `states` (stages `1..=N`) and `controls`
/// (stages `0..N`).
pub fn objective(
    states: &[CombinedState],
    controls: &[ControlInput],
    reference: &ReferenceTrajectory,
    weights: &Weights,
    robot: &RobotParams,
) -> Result<f64, OcpError> {
    let n = controls.len();
    for (what, len) in [("states", states.len()), ("reference", reference.len())] {
        if len != n {
            return Err(OcpError::LengthMismatch {
                what,
                expected: n,
                actual: len,
            });
        }
    }
    let mut total = 0.0;
    for k in 0..n {
        total += stage_cost(&states[k], &controls[k], &reference.poses[k], weights, robot);
    }
    Ok(total)
}

pub(crate) fn stage_cost(
    next_state: &CombinedState,
    control: &ControlInput,
    reference: &Pose2D,
    weights: &Weights,
    robot: &RobotParams,
) -> f64 {
    let e = tracking_error(&forward_kinematics(&next_state.q, robot), reference);
    let mut c = weights.q2 * next_state.slosh.beta.powi(2);
    for i in 0..3 {
        c += weights.q1[i] * e[i] * e[i] + weights.r[i] * control[i] * control[i];
    }
    c
}

/// Objective evaluated directly on a decision vector.
pub fn objective_at(problem: &OcpProblem, z: &[f64]) -> Result<f64, OcpError> {
    problem.check_dim(z)?;
    let (controls, states) = problem.layout.split(z);
    objective(&states, &controls, &problem.reference, &problem.weights, &problem.robot)
}

/// Analytic gradient of [`objective_at`] in decision-vector layout.
pub fn objective_gradient(problem: &OcpProblem, z: &[f64]) -> Result<Vec<f64>, OcpError> {
    problem.check_dim(z)?;
    let layout = problem.layout;
    let w = &problem.weights;
    let mut g = vec![0.0; layout.dim()];
    for k in 0..layout.n {
        let c = layout.control(k);
        for i in 0..3 {
            g[c + i] = 2.0 * w.r[i] * z[c + i];
        }
        let s = layout.state(k);
        let q = Vector3::new(z[s], z[s + 1], z[s + 2]);
        let e = tracking_error(&forward_kinematics(&q, &problem.robot), &problem.reference.poses[k]);
        let weighted = Vector3::new(w.q1[0] * e[0], w.q1[1] * e[1], w.q1[2] * e[2]);
        let gq = jacobian(&q, &problem.robot).transpose() * weighted * 2.0;
        g[s..s + 3].copy_from_slice(gq.as_slice());
        g[s + 6] = 2.0 * w.q2 * z[s + 6];
    }
    Ok(g)
}

/// Stacked residuals `ξ_{k+1} - euler_step(ξ_k, u_k)` for `k = 0..N`.
pub fn dynamics_defects(problem: &OcpProblem, z: &[f64]) -> Result<Vec<f64>, OcpError> {
    problem.check_dim(z)?;
    let (controls, states) = problem.layout.split(z);
    let mut out = vec![0.0; problem.layout.num_defects()];
    let mut prev = problem.initial_state;
    for k in 0..problem.layout.n {
        let pred = euler_step_unchecked(&prev, &controls[k], problem.horizon.dt, &problem.robot, &problem.liquid);
        let r = states[k].to_vector() - pred.to_vector();
        out[STATE_DIM * k..STATE_DIM * (k + 1)].copy_from_slice(r.as_slice());
        prev = states[k];
    }
    Ok(out)
}

/// Dense Jacobian of [`dynamics_defects`], `8N × 11N`, in decision-vector
/// layout. Used for verification and KKT reporting, not inside the solver.
pub fn dynamics_defects_jacobian(problem: &OcpProblem, z: &[f64]) -> Result<DMatrix<f64>, OcpError> {
    problem.check_dim(z)?;
    let layout = problem.layout;
    let (controls, states) = layout.split(z);
    let mut jac = DMatrix::zeros(layout.num_defects(), layout.dim());
    let mut prev = problem.initial_state;
    for k in 0..layout.n {
        let (_, a, b) =
            euler_step_with_jacobians(&prev, &controls[k], problem.horizon.dt, &problem.robot, &problem.liquid);
        let row = STATE_DIM * k;
        for r in 0..STATE_DIM {
            jac[(row + r, layout.state(k) + r)] = 1.0;
            for j in 0..CONTROL_DIM {
                jac[(row + r, layout.control(k) + j)] = -b[(r, j)];
            }
            if k > 0 {
                for j in 0..STATE_DIM {
                    jac[(row + r, layout.state(k - 1) + j)] = -a[(r, j)];
                }
            }
        }
        prev = states[k];
    }
    Ok(jac)
}

/// Assemble and validate a problem. An initial state outside the joint box
/// is projected onto it and flagged.
pub fn build_problem(
    initial_state: CombinedState,
    reference: ReferenceTrajectory,
    weights: Weights,
    bounds: Bounds,
    horizon: HorizonConfig,
    robot: RobotParams,
    liquid: LiquidParams,
) -> Result<OcpProblem, OcpError> {
    horizon.validate()?;
    bounds.validate()?;
    weights.validate()?;
    robot.validate()?;
    liquid.validate()?;
    if reference.len() != horizon.n {
        return Err(OcpError::LengthMismatch {
            what: "reference trajectory",
            expected: horizon.n,
            actual: reference.len(),
        });
    }

    let mut x0 = initial_state;
    let mut clamped = false;
    for i in 0..3 {
        let q = x0.q[i].clamp(bounds.q_min[i], bounds.q_max[i]);
        let qd = x0.qdot[i].clamp(bounds.qdot_min[i], bounds.qdot_max[i]);
        clamped |= q != x0.q[i] || qd != x0.qdot[i];
        x0.q[i] = q;
        x0.qdot[i] = qd;
    }
    if clamped {
        warn!("initial state outside joint bounds; clamped");
    }

    Ok(OcpProblem {
        initial_state: x0,
        reference,
        weights,
        bounds,
        horizon,
        robot,
        liquid,
        layout: Layout { n: horizon.n },
        initial_state_clamped: clamped,
    })
}

/// Initial guess for the next solve: controls shifted one stage left with
/// the last one repeated, states rolled out from the new initial state.
/// Without a previous solution the controls start at zero.
pub fn shift_warm_start(previous: Option<&OcpSolution>, problem: &OcpProblem) -> WarmStart {
    let n = problem.layout.n;
    let Some(prev) = previous.filter(|p| p.controls.len() == n) else {
        return WarmStart::primal(problem.rollout(&vec![Vector3::zeros(); n]));
    };
    let mut controls: Vec<ControlInput> = prev.controls[1..].to_vec();
    controls.push(prev.controls[n - 1]);
    let controls: Vec<_> = controls.iter().map(|u| problem.bounds.clamp_control(u)).collect();

    let mut multipliers = None;
    if prev.multipliers.len() == STATE_DIM * n {
        let mut m = prev.multipliers[STATE_DIM..].to_vec();
        m.extend_from_slice(&prev.multipliers[STATE_DIM * (n - 1)..]);
        multipliers = Some(m);
    }
    WarmStart {
        z: problem.rollout(&controls),
        multipliers,
        penalty: Some(prev.penalty),
    }
}
