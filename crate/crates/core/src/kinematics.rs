//! Planar 3R forward kinematics and its time derivatives.
//!
//! The container pose is expressed with the `x` axis pointing along the
//! zero-angle arm and the `z` coordinate carrying the negative sign of the
//! summed link sines:
//!
//! ```text
//! x_c     =   L1 cos φ1 + L2 cos φ2 + L3 cos φ3
//! z_c     = -(L1 sin φ1 + L2 sin φ2 + L3 sin φ3)
//! θ_c     =   φ3
//! ```
//!
//! with cumulative angles `φ1 = q1`, `φ2 = q1 + q2`, `φ3 = q1 + q2 + q3`.
//! Angles are never wrapped.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Link lengths of the planar arm, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotParams {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl Default for RobotParams {
    /// UR5e upper arm, forearm and the wrist offset to the container.
    fn default() -> Self {
        Self {
            l1: 0.425,
            l2: 0.3922,
            l3: 0.1,
        }
    }
}

impl RobotParams {
    pub fn new(l1: f64, l2: f64, l3: f64) -> Result<Self, ModelError> {
        let params = Self { l1, l2, l3 };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [("l1", self.l1), ("l2", self.l2), ("l3", self.l3)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ModelError::InvalidParameter {
                    name,
                    value: v,
                    reason: "link lengths must be strictly positive",
                });
            }
        }
        Ok(())
    }

    /// Total reach `L1 + L2 + L3`.
    pub fn reach(&self) -> f64 {
        self.l1 + self.l2 + self.l3
    }

    pub(crate) fn lengths(&self) -> [f64; 3] {
        [self.l1, self.l2, self.l3]
    }
}

/// Container pose in the task plane.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub z: f64,
    pub theta: f64,
}

impl Pose2D {
    pub fn new(x: f64, z: f64, theta: f64) -> Self {
        Self { x, z, theta }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.z, self.theta)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.z.is_finite() && self.theta.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskRates {
    pub xdot: f64,
    pub zdot: f64,
    pub thetadot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskAccel {
    pub xddot: f64,
    pub zddot: f64,
    pub thetaddot: f64,
}

/// Cumulative link angles `(q1, q1+q2, q1+q2+q3)`.
#[inline]
pub(crate) fn cumulative(q: &Vector3<f64>) -> [f64; 3] {
    [q[0], q[0] + q[1], q[0] + q[1] + q[2]]
}

pub fn forward_kinematics(q: &Vector3<f64>, params: &RobotParams) -> Pose2D {
    let phi = cumulative(q);
    let len = params.lengths();
    let mut x = 0.0;
    let mut z = 0.0;
    for i in 0..3 {
        x += len[i] * phi[i].cos();
        z -= len[i] * phi[i].sin();
    }
    Pose2D::new(x, z, phi[2])
}

/// Analytic Jacobian `∂(x_c, z_c, θ_c)/∂q`.
pub fn jacobian(q: &Vector3<f64>, params: &RobotParams) -> Matrix3<f64> {
    let phi = cumulative(q);
    let len = params.lengths();
    // Column j collects every link whose cumulative angle includes q_j.
    let mut jac = Matrix3::zeros();
    for j in 0..3 {
        let mut dx = 0.0;
        let mut dz = 0.0;
        for i in j..3 {
            dx -= len[i] * phi[i].sin();
            dz -= len[i] * phi[i].cos();
        }
        jac[(0, j)] = dx;
        jac[(1, j)] = dz;
        jac[(2, j)] = 1.0;
    }
    jac
}

/// Time derivative of [`jacobian`] along the joint velocity `qdot`.
pub fn jacobian_dot(q: &Vector3<f64>, qdot: &Vector3<f64>, params: &RobotParams) -> Matrix3<f64> {
    let phi = cumulative(q);
    let w = cumulative(qdot);
    let len = params.lengths();
    let mut jd = Matrix3::zeros();
    for j in 0..3 {
        let mut dx = 0.0;
        let mut dz = 0.0;
        for i in j..3 {
            dx -= len[i] * phi[i].cos() * w[i];
            dz += len[i] * phi[i].sin() * w[i];
        }
        jd[(0, j)] = dx;
        jd[(1, j)] = dz;
    }
    jd
}

pub fn task_velocity(q: &Vector3<f64>, qdot: &Vector3<f64>, params: &RobotParams) -> TaskRates {
    let v = jacobian(q, params) * qdot;
    TaskRates {
        xdot: v[0],
        zdot: v[1],
        thetadot: qdot[0] + qdot[1] + qdot[2],
    }
}

/// `J̇(q, q̇) q̇ + J(q) u`.
pub fn task_acceleration(q: &Vector3<f64>, qdot: &Vector3<f64>, u: &Vector3<f64>, params: &RobotParams) -> TaskAccel {
    let a = jacobian_dot(q, qdot, params) * qdot + jacobian(q, params) * u;
    TaskAccel {
        xddot: a[0],
        zddot: a[1],
        thetaddot: u[0] + u[1] + u[2],
    }
}

/// Partial derivatives of the Cartesian container acceleration `(ẍ_c, z̈_c)`
/// with respect to `q`, `q̇` and `u`. Row 0 is `ẍ_c`, row 1 is `z̈_c`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AccelPartials {
    pub d_q: [[f64; 3]; 2],
    pub d_qdot: [[f64; 3]; 2],
    pub d_u: [[f64; 3]; 2],
}

/// Task acceleration together with its sensitivities, sharing the
/// trigonometric evaluations.
pub(crate) fn task_acceleration_with_partials(
    q: &Vector3<f64>,
    qdot: &Vector3<f64>,
    u: &Vector3<f64>,
    params: &RobotParams,
) -> (TaskAccel, AccelPartials) {
    let phi = cumulative(q);
    let w = cumulative(qdot);
    let a = cumulative(u);
    let len = params.lengths();

    // ẍ = -Σ L_i (cos φ_i w_i² + sin φ_i a_i)
    // z̈ =  Σ L_i (sin φ_i w_i² - cos φ_i a_i)
    let mut xdd = 0.0;
    let mut zdd = 0.0;
    let mut dphi = [[0.0; 3]; 2];
    let mut dw = [[0.0; 3]; 2];
    let mut da = [[0.0; 3]; 2];
    for i in 0..3 {
        let (s, c) = phi[i].sin_cos();
        let w2 = w[i] * w[i];
        xdd -= len[i] * (c * w2 + s * a[i]);
        zdd += len[i] * (s * w2 - c * a[i]);
        dphi[0][i] = len[i] * (s * w2 - c * a[i]);
        dphi[1][i] = len[i] * (c * w2 + s * a[i]);
        dw[0][i] = -2.0 * len[i] * c * w[i];
        dw[1][i] = 2.0 * len[i] * s * w[i];
        da[0][i] = -len[i] * s;
        da[1][i] = -len[i] * c;
    }

    // Chain through φ = T q with T lower-triangular ones: ∂/∂q_j = Σ_{i≥j} ∂/∂φ_i.
    let chain = |d: &[[f64; 3]; 2]| {
        let mut out = [[0.0; 3]; 2];
        for r in 0..2 {
            let mut acc = 0.0;
            for j in (0..3).rev() {
                acc += d[r][j];
                out[r][j] = acc;
            }
        }
        out
    };

    (
        TaskAccel {
            xddot: xdd,
            zddot: zdd,
            thetaddot: a[2],
        },
        AccelPartials {
            d_q: chain(&dphi),
            d_qdot: chain(&dw),
            d_u: chain(&da),
        },
    )
}
