//! Continuous-time models of the arm and the liquid, and the discrete steps
//! built on them.
//!
//! The arm is a triple double-integrator driven by joint accelerations. The
//! liquid surface is a damped pendulum of virtual length `l` hinged at the
//! free surface, `h` above the container reference point, whose angle `β` is
//! measured from the container axis:
//!
//! ```text
//! β̈ = ( -(l - h cos β) θ̈ + h sin β θ̇² + cos(θ + β) ẍ
//!       - sin(θ + β)(g + z̈) - d/(m l) β̇ ) / l
//! ```

use std::f64::consts::FRAC_PI_2;

use nalgebra::{SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::kinematics::{cumulative, task_acceleration_with_partials, task_velocity, RobotParams, TaskAccel};

pub const STATE_DIM: usize = 8;
pub const CONTROL_DIM: usize = 3;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type StateJacobian = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type ControlJacobian = SMatrix<f64, STATE_DIM, CONTROL_DIM>;

/// Joint accelerations commanded to the low-level controllers, rad/s².
pub type ControlInput = Vector3<f64>;

pub const STANDARD_GRAVITY: f64 = 9.81;

/// Equivalent-pendulum parameters of the liquid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiquidParams {
    /// Virtual pendulum length, m.
    pub l: f64,
    /// Filling level (pivot height above the container reference), m.
    pub h: f64,
    /// Pendulum mass, kg.
    pub m: f64,
    /// Damping coefficient of the Rayleigh dissipation term.
    pub d: f64,
    /// Gravity, m/s².
    pub g: f64,
}

impl Default for LiquidParams {
    /// Roughly a glass of water.
    fn default() -> Self {
        Self {
            l: 0.02,
            h: 0.08,
            m: 1.0,
            d: 0.005,
            g: STANDARD_GRAVITY,
        }
    }
}

impl LiquidParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let checks: [(&'static str, f64, bool, &'static str); 5] = [
            ("l", self.l, self.l > 0.0, "pendulum length must be positive"),
            ("h", self.h, self.h >= 0.0, "filling level must be non-negative"),
            ("m", self.m, self.m > 0.0, "mass must be positive"),
            ("d", self.d, self.d >= 0.0, "damping must be non-negative"),
            ("g", self.g, self.g > 0.0, "gravity must be positive"),
        ];
        for (name, value, ok, reason) in checks {
            if !(value.is_finite() && ok) {
                return Err(ModelError::InvalidParameter { name, value, reason });
            }
        }
        Ok(())
    }

    /// Coefficient of `β̇` in `β̈`, i.e. `d / (m l²)`.
    fn damping_rate(&self) -> f64 {
        self.d / (self.m * self.l * self.l)
    }
}

/// Natural frequency `sqrt(g / l)` of the liquid, rad/s.
pub fn natural_frequency(params: &LiquidParams) -> Result<f64, ModelError> {
    if !(params.l > 0.0) {
        return Err(ModelError::InvalidParameter {
            name: "l",
            value: params.l,
            reason: "pendulum length must be positive",
        });
    }
    Ok((params.g / params.l).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SloshState {
    pub beta: f64,
    pub betadot: f64,
}

impl SloshState {
    pub fn new(beta: f64, betadot: f64) -> Self {
        Self { beta, betadot }
    }

    /// False once the surface tilts past vertical and the flat-surface
    /// pendulum picture no longer describes the liquid (it spills).
    pub fn is_valid(&self) -> bool {
        self.beta.abs() <= FRAC_PI_2
    }
}

/// Robot joints plus slosh, `ξ = (q, q̇, β, β̇)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CombinedState {
    pub q: Vector3<f64>,
    pub qdot: Vector3<f64>,
    pub slosh: SloshState,
}

impl CombinedState {
    pub fn at_rest(q: Vector3<f64>) -> Self {
        Self { q, ..Self::default() }
    }

    pub fn to_vector(&self) -> StateVector {
        let mut v = StateVector::zeros();
        self.write_to(v.as_mut_slice());
        v
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self {
            q: Vector3::new(s[0], s[1], s[2]),
            qdot: Vector3::new(s[3], s[4], s[5]),
            slosh: SloshState::new(s[6], s[7]),
        }
    }

    pub fn write_to(&self, out: &mut [f64]) {
        out[..3].copy_from_slice(self.q.as_slice());
        out[3..6].copy_from_slice(self.qdot.as_slice());
        out[6] = self.slosh.beta;
        out[7] = self.slosh.betadot;
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }

    fn axpy(&self, scale: f64, d: &CombinedState) -> CombinedState {
        CombinedState {
            q: self.q + d.q * scale,
            qdot: self.qdot + d.qdot * scale,
            slosh: SloshState::new(
                self.slosh.beta + scale * d.slosh.beta,
                self.slosh.betadot + scale * d.slosh.betadot,
            ),
        }
    }
}

/// Angular acceleration of the slosh pendulum for a given container motion.
pub fn slosh_acceleration(
    slosh: &SloshState,
    theta: f64,
    thetadot: f64,
    accel: &TaskAccel,
    params: &LiquidParams,
) -> f64 {
    let SloshState { beta, betadot } = *slosh;
    let (sb, cb) = beta.sin_cos();
    let (s, c) = (theta + beta).sin_cos();
    let bracket = -(params.l - params.h * cb) * accel.thetaddot + params.h * sb * thetadot * thetadot + c * accel.xddot
        - s * (params.g + accel.zddot)
        - params.d / (params.m * params.l) * betadot;
    bracket / params.l
}

/// Time derivative of the combined state; the result carries `(q̇, u, β̇, β̈)`
/// in the `(q, qdot, slosh)` slots.
pub fn combined_derivative(
    xi: &CombinedState,
    u: &ControlInput,
    robot: &RobotParams,
    liquid: &LiquidParams,
) -> CombinedState {
    let theta = cumulative(&xi.q)[2];
    let thetadot = task_velocity(&xi.q, &xi.qdot, robot).thetadot;
    let (accel, _) = task_acceleration_with_partials(&xi.q, &xi.qdot, u, robot);
    CombinedState {
        q: xi.qdot,
        qdot: *u,
        slosh: SloshState::new(
            xi.slosh.betadot,
            slosh_acceleration(&xi.slosh, theta, thetadot, &accel, liquid),
        ),
    }
}

/// Derivative together with `∂f/∂ξ` and `∂f/∂u`.
pub fn combined_derivative_with_jacobians(
    xi: &CombinedState,
    u: &ControlInput,
    robot: &RobotParams,
    liquid: &LiquidParams,
) -> (CombinedState, StateJacobian, ControlJacobian) {
    let theta = cumulative(&xi.q)[2];
    let thetadot = cumulative(&xi.qdot)[2];
    let (accel, partials) = task_acceleration_with_partials(&xi.q, &xi.qdot, u, robot);
    let SloshState { beta, betadot } = xi.slosh;
    let (sb, cb) = beta.sin_cos();
    let (s, c) = (theta + beta).sin_cos();
    let inv_l = 1.0 / liquid.l;
    let gz = liquid.g + accel.zddot;

    let fbeta = slosh_acceleration(&xi.slosh, theta, thetadot, &accel, liquid);

    let mut df_dx = StateJacobian::zeros();
    let mut df_du = ControlJacobian::zeros();
    for j in 0..3 {
        df_dx[(j, 3 + j)] = 1.0;
        df_du[(3 + j, j)] = 1.0;
    }
    df_dx[(6, 7)] = 1.0;

    // Shared term from θ = q1 + q2 + q3 inside sin/cos(θ + β).
    let d_angle = -s * accel.xddot - c * gz;
    for j in 0..3 {
        df_dx[(7, j)] = inv_l * (d_angle + c * partials.d_q[0][j] - s * partials.d_q[1][j]);
        df_dx[(7, 3 + j)] =
            inv_l * (2.0 * liquid.h * sb * thetadot + c * partials.d_qdot[0][j] - s * partials.d_qdot[1][j]);
        df_du[(7, j)] = inv_l * (-(liquid.l - liquid.h * cb) + c * partials.d_u[0][j] - s * partials.d_u[1][j]);
    }
    df_dx[(7, 6)] = inv_l * (-liquid.h * sb * accel.thetaddot + liquid.h * cb * thetadot * thetadot + d_angle);
    df_dx[(7, 7)] = -liquid.damping_rate();

    let deriv = CombinedState {
        q: xi.qdot,
        qdot: *u,
        slosh: SloshState::new(betadot, fbeta),
    };
    (deriv, df_dx, df_du)
}

fn check_step(dt: f64) -> Result<(), ModelError> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonPositiveStep(dt))
    }
}

/// One forward-Euler step with the input held over the step.
pub fn euler_step(
    xi: &CombinedState,
    u: &ControlInput,
    dt: f64,
    robot: &RobotParams,
    liquid: &LiquidParams,
) -> Result<CombinedState, ModelError> {
    check_step(dt)?;
    Ok(euler_step_unchecked(xi, u, dt, robot, liquid))
}

pub(crate) fn euler_step_unchecked(
    xi: &CombinedState,
    u: &ControlInput,
    dt: f64,
    robot: &RobotParams,
    liquid: &LiquidParams,
) -> CombinedState {
    xi.axpy(dt, &combined_derivative(xi, u, robot, liquid))
}

/// Euler step plus its Jacobians `∂ξ⁺/∂ξ = I + dt ∂f/∂ξ`, `∂ξ⁺/∂u = dt ∂f/∂u`.
pub fn euler_step_with_jacobians(
    xi: &CombinedState,
    u: &ControlInput,
    dt: f64,
    robot: &RobotParams,
    liquid: &LiquidParams,
) -> (CombinedState, StateJacobian, ControlJacobian) {
    let (f, fx, fu) = combined_derivative_with_jacobians(xi, u, robot, liquid);
    (xi.axpy(dt, &f), StateJacobian::identity() + fx * dt, fu * dt)
}

/// Classical fourth-order Runge-Kutta step, input held constant.
pub fn rk4_step(
    xi: &CombinedState,
    u: &ControlInput,
    dt: f64,
    robot: &RobotParams,
    liquid: &LiquidParams,
) -> Result<CombinedState, ModelError> {
    check_step(dt)?;
    Ok(rk4_step_unchecked(xi, u, dt, robot, liquid))
}

pub(crate) fn rk4_step_unchecked(
    xi: &CombinedState,
    u: &ControlInput,
    dt: f64,
    robot: &RobotParams,
    liquid: &LiquidParams,
) -> CombinedState {
    let f = |x: &CombinedState| combined_derivative(x, u, robot, liquid);
    let k1 = f(xi);
    let k2 = f(&xi.axpy(0.5 * dt, &k1));
    let k3 = f(&xi.axpy(0.5 * dt, &k2));
    let k4 = f(&xi.axpy(dt, &k3));
    xi.axpy(dt / 6.0, &k1)
        .axpy(dt / 3.0, &k2)
        .axpy(dt / 3.0, &k3)
        .axpy(dt / 6.0, &k4)
}

/// Prescribed container motion at one instant, for driving the slosh model
/// directly without the arm.
#[derive(Debug, Clone, Copy, Default)]
pub struct ContainerMotion {
    pub theta: f64,
    pub thetadot: f64,
    pub accel: TaskAccel,
}

/// RK4 step of the slosh pendulum alone under a prescribed container motion
/// `motion(t)`.
pub fn slosh_rk4_step<F>(
    slosh: &SloshState,
    t: f64,
    dt: f64,
    motion: F,
    params: &LiquidParams,
) -> Result<SloshState, ModelError>
where
    F: Fn(f64) -> ContainerMotion,
{
    check_step(dt)?;
    let f = |t: f64, s: &SloshState| {
        let m = motion(t);
        (s.betadot, slosh_acceleration(s, m.theta, m.thetadot, &m.accel, params))
    };
    let shift = |s: &SloshState, k: (f64, f64), h: f64| SloshState::new(s.beta + h * k.0, s.betadot + h * k.1);
    let k1 = f(t, slosh);
    let k2 = f(t + 0.5 * dt, &shift(slosh, k1, 0.5 * dt));
    let k3 = f(t + 0.5 * dt, &shift(slosh, k2, 0.5 * dt));
    let k4 = f(t + dt, &shift(slosh, k3, dt));
    Ok(SloshState::new(
        slosh.beta + dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
        slosh.betadot + dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn robot() -> RobotParams {
        RobotParams::default()
    }

    #[test]
    fn natural_frequency_values() {
        let p = LiquidParams::default();
        assert_abs_diff_eq!(natural_frequency(&p).unwrap(), 22.1472, epsilon = 1e-4);
        let p = LiquidParams { l: 0.08, ..p };
        assert_abs_diff_eq!(natural_frequency(&p).unwrap(), 11.0736, epsilon = 1e-4);
        let p = LiquidParams { l: 9.81, ..p };
        assert_abs_diff_eq!(natural_frequency(&p).unwrap(), 1.0, epsilon = 1e-15);
        let p = LiquidParams { l: 0.0, ..p };
        assert!(natural_frequency(&p).is_err());
        assert!(LiquidParams { l: -0.1, ..p }.validate().is_err());
        assert!(LiquidParams {
            d: -0.1,
            ..LiquidParams::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn slosh_acceleration_examples() {
        let p = LiquidParams::default();
        let rest = TaskAccel::default();
        assert_eq!(slosh_acceleration(&SloshState::default(), 0.0, 0.0, &rest, &p), 0.0);
        assert_abs_diff_eq!(
            slosh_acceleration(&SloshState::new(0.1, 0.0), 0.0, 0.0, &rest, &p),
            -(9.81 / 0.02) * 0.1f64.sin(),
            epsilon = 1e-12
        );
        let push = TaskAccel {
            xddot: 0.1,
            ..TaskAccel::default()
        };
        assert_abs_diff_eq!(
            slosh_acceleration(&SloshState::default(), 0.0, 0.0, &push, &p),
            5.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn equilibrium_is_fixed() {
        let xi = CombinedState::default();
        let d = combined_derivative(&xi, &Vector3::zeros(), &robot(), &LiquidParams::default());
        assert_eq!(d.to_vector(), StateVector::zeros());
    }

    #[test]
    fn euler_moves_joint_linearly() {
        let xi = CombinedState {
            qdot: Vector3::new(0.3, 0.0, 0.0),
            ..CombinedState::default()
        };
        let next = euler_step(&xi, &Vector3::zeros(), 1.0 / 30.0, &robot(), &LiquidParams::default()).unwrap();
        assert_abs_diff_eq!(next.q[0], 0.01, epsilon = 1e-15);
        assert!(euler_step(&xi, &Vector3::zeros(), 0.0, &robot(), &LiquidParams::default()).is_err());
        assert!(rk4_step(&xi, &Vector3::zeros(), -1.0, &robot(), &LiquidParams::default()).is_err());
    }

    #[test]
    fn rk4_converges_at_fourth_order() {
        let liquid = LiquidParams::default();
        let xi = CombinedState {
            q: Vector3::new(-1.2, 2.0, -0.8),
            qdot: Vector3::new(0.2, -0.1, 0.05),
            slosh: SloshState::new(0.02, 0.0),
        };
        let u = Vector3::new(0.5, -0.3, 0.2);
        let total = 0.2;
        let run = |steps: usize| {
            let dt = total / steps as f64;
            (0..steps).fold(xi, |x, _| rk4_step(&x, &u, dt, &robot(), &liquid).unwrap())
        };
        let coarse = run(20);
        let mid = run(40);
        let fine = run(80);
        let e1 = (coarse.to_vector() - mid.to_vector()).norm();
        let e2 = (mid.to_vector() - fine.to_vector()).norm();
        let ratio = e1 / e2;
        assert!((12.0..20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn step_jacobians_match_finite_differences() {
        let liquid = LiquidParams::default();
        let xi = CombinedState {
            q: Vector3::new(0.4, -1.1, 0.9),
            qdot: Vector3::new(0.7, -0.4, 0.3),
            slosh: SloshState::new(0.15, -0.8),
        };
        let u = Vector3::new(1.5, -2.0, 0.7);
        let (_, fx, fu) = combined_derivative_with_jacobians(&xi, &u, &robot(), &liquid);
        let eps = 1e-6;
        for i in 0..STATE_DIM {
            let mut p = xi.to_vector();
            let mut m = xi.to_vector();
            p[i] += eps;
            m[i] -= eps;
            let fp = combined_derivative(&CombinedState::from_slice(p.as_slice()), &u, &robot(), &liquid);
            let fm = combined_derivative(&CombinedState::from_slice(m.as_slice()), &u, &robot(), &liquid);
            let col = (fp.to_vector() - fm.to_vector()) / (2.0 * eps);
            for r in 0..STATE_DIM {
                assert_abs_diff_eq!(fx[(r, i)], col[r], epsilon = 1e-5 * (1.0 + col[r].abs()));
            }
        }
        for j in 0..CONTROL_DIM {
            let mut up = u;
            let mut um = u;
            up[j] += eps;
            um[j] -= eps;
            let col = (combined_derivative(&xi, &up, &robot(), &liquid).to_vector()
                - combined_derivative(&xi, &um, &robot(), &liquid).to_vector())
                / (2.0 * eps);
            for r in 0..STATE_DIM {
                assert_abs_diff_eq!(fu[(r, j)], col[r], epsilon = 1e-5 * (1.0 + col[r].abs()));
            }
        }
    }

    #[test]
    fn validity_flag() {
        assert!(SloshState::new(1.5, 0.0).is_valid());
        assert!(!SloshState::new(-1.6, 0.0).is_valid());
    }

    proptest! {
        #[test]
        fn robot_block_is_linear(q in prop::array::uniform3(-3.0..3.0f64),
                                 qd in prop::array::uniform3(-3.0..3.0f64),
                                 u in prop::array::uniform3(-8.0..8.0f64),
                                 beta in -1.0..1.0f64, betadot in -5.0..5.0f64) {
            let xi = CombinedState {
                q: Vector3::from(q),
                qdot: Vector3::from(qd),
                slosh: SloshState::new(beta, betadot),
            };
            let u = Vector3::from(u);
            let d = combined_derivative(&xi, &u, &robot(), &LiquidParams::default());
            prop_assert_eq!(d.q, xi.qdot);
            prop_assert_eq!(d.qdot, u);
            prop_assert_eq!(d.slosh.beta, betadot);

            let dt = 1.0 / 30.0;
            let next = euler_step(&xi, &u, dt, &robot(), &LiquidParams::default()).unwrap();
            let resid = next.to_vector() - xi.to_vector() - d.to_vector() * dt;
            prop_assert!(resid.amax() < 1e-12);
        }
    }
}
