//! Slosh-aware nonlinear model predictive control for a planar three-joint
//! arm carrying an open liquid container.

pub mod dynamics;
pub mod error;
pub mod kinematics;
pub mod nlp_solver;
pub mod ocp;
pub mod operator_input;
pub mod simulation;
