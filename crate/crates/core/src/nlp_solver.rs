//! Augmented-Lagrangian solver for the multiple-shooting NLP.
//!
//! The outer loop prices the dynamics defects `c(z)` through multipliers
//! `λ` and a quadratic penalty `ρ`:
//!
//! ```text
//! L_A(z; λ, ρ) = J(z) + λᵀ c(z) + ρ/2 ‖c(z)‖²
//! ```
//!
//! Each subproblem `min L_A` over the decision box is solved by a projected
//! Newton iteration (ε-active set, Armijo search along the projection arc).
//! The curvature model is the Gauss-Newton matrix, which drops the
//! second derivatives of the kinematics and of the slosh row. It is positive
//! semidefinite and keeps the stage structure: ordering
//! the unknowns stage by stage as `(u_0, ξ_1, u_1, ξ_2, …)` makes it a band
//! matrix of half-width 18, factorized in `O(N)`.

use std::time::{Duration, Instant};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::{euler_step_unchecked, euler_step_with_jacobians, CombinedState, CONTROL_DIM, STATE_DIM};
use crate::error::SolverError;
use crate::kinematics::{forward_kinematics, jacobian};
use crate::ocp::{
    dynamics_defects, dynamics_defects_jacobian, objective_at, objective_gradient, tracking_error, OcpProblem,
    OcpSolution, SolveStatus, WarmStart,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    /// ∞-norm bound on the dynamics defects.
    pub feasibility_tolerance: f64,
    /// ∞-norm bound on the projected gradient of the augmented Lagrangian.
    pub optimality_tolerance: f64,
    pub bound_tolerance: f64,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
    /// Largest penalty taken over from a warm start. A penalty inherited
    /// unchecked ratchets up from tick to tick and stiffens every later solve.
    pub warm_penalty_limit: f64,
    /// Wall-clock budget per solve, seconds. `f64::INFINITY` disables it.
    pub time_budget: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_outer_iterations: 40,
            max_inner_iterations: 60,
            feasibility_tolerance: 1e-6,
            optimality_tolerance: 1e-5,
            bound_tolerance: 1e-8,
            initial_penalty: 1e3,
            penalty_growth: 10.0,
            max_penalty: 1e10,
            warm_penalty_limit: 1e5,
            time_budget: 1.0,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), SolverError> {
        if self.max_outer_iterations == 0 || self.max_inner_iterations == 0 {
            return Err(SolverError::InvalidOptions("iteration limits must be positive"));
        }
        let positive = [
            self.feasibility_tolerance,
            self.optimality_tolerance,
            self.bound_tolerance,
            self.initial_penalty,
            self.time_budget,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(SolverError::InvalidOptions(
                "tolerances, penalty and budget must be positive",
            ));
        }
        if !(self.penalty_growth > 1.0)
            || !(self.max_penalty >= self.initial_penalty)
            || !(self.warm_penalty_limit >= self.initial_penalty)
        {
            return Err(SolverError::InvalidOptions(
                "penalty growth must exceed one and the penalty caps must exceed the initial penalty",
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Band matrix
// ---------------------------------------------------------------------------

/// Symmetric band matrix stored by lower rows, with an in-place Cholesky
/// factorization.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, half_bandwidth: usize) -> Self {
        Self {
            n,
            bw: half_bandwidth,
            data: vec![0.0; n * (half_bandwidth + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn half_bandwidth(&self) -> usize {
        self.bw
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + self.bw - (i - j)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Add `v` to the symmetric pair `(i, j)`, `(j, i)`.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.data[self.idx(i, i)]
    }

    /// Zero row and column `i` except the diagonal.
    fn isolate(&mut self, i: usize) {
        let lo = i.saturating_sub(self.bw);
        for j in lo..i {
            let k = self.idx(i, j);
            self.data[k] = 0.0;
        }
        let hi = (i + self.bw).min(self.n - 1);
        for r in i + 1..=hi {
            let k = self.idx(r, i);
            self.data[k] = 0.0;
        }
    }

    /// Overwrite with the lower Cholesky factor. Fails on a non-positive
    /// pivot, leaving the contents unspecified.
    pub fn cholesky_in_place(&mut self) -> Result<(), usize> {
        let (n, bw) = (self.n, self.bw);
        for j in 0..n {
            let lo = j.saturating_sub(bw);
            let mut s = self.data[self.idx(j, j)];
            for k in lo..j {
                let l = self.data[self.idx(j, k)];
                s -= l * l;
            }
            if !(s > 0.0) || !s.is_finite() {
                return Err(j);
            }
            let pivot = s.sqrt();
            let kjj = self.idx(j, j);
            self.data[kjj] = pivot;
            for i in j + 1..=(j + bw).min(n - 1) {
                let lo_i = i.saturating_sub(bw);
                let mut s = self.data[self.idx(i, j)];
                for k in lo_i.max(lo)..j {
                    s -= self.data[self.idx(i, k)] * self.data[self.idx(j, k)];
                }
                let kij = self.idx(i, j);
                self.data[kij] = s / pivot;
            }
        }
        Ok(())
    }

    /// Solve `L Lᵀ x = b` in place with a factor from [`cholesky_in_place`].
    ///
    /// [`cholesky_in_place`]: BandMatrix::cholesky_in_place
    pub fn cholesky_solve(&self, b: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let mut s = b[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.data[self.idx(i, k)] * b[k];
            }
            b[i] = s / self.data[self.idx(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for r in i + 1..=(i + bw).min(n - 1) {
                s -= self.data[self.idx(r, i)] * b[r];
            }
            b[i] = s / self.data[self.idx(i, i)];
        }
    }
}

// ---------------------------------------------------------------------------
// Box-constrained inner solver
// ---------------------------------------------------------------------------

/// Smooth objective over a box with a band-structured curvature model.
pub trait BoxProblem {
    fn dim(&self) -> usize;
    fn lower(&self) -> &[f64];
    fn upper(&self) -> &[f64];
    fn half_bandwidth(&self) -> usize;
    fn value(&mut self, z: &[f64]) -> f64;
    /// Fill the exact gradient and a positive semidefinite curvature model;
    /// returns the objective value.
    fn linearize(&mut self, z: &[f64], grad: &mut [f64], hess: &mut BandMatrix) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerStatus {
    Optimal,
    IterationLimit,
    Stalled,
    TimedOut,
}

#[derive(Debug, Clone, Copy)]
pub struct InnerReport {
    pub status: InnerStatus,
    pub iterations: usize,
    pub value: f64,
    /// ∞-norm of `z - P(z - ∇f)` at the returned point.
    pub projected_gradient: f64,
}

fn project(z: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..z.len() {
        z[i] = z[i].clamp(lo[i], hi[i]);
    }
}

fn projected_gradient_norm(z: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    z.iter()
        .zip(g)
        .enumerate()
        .map(|(i, (&zi, &gi))| (zi - (zi - gi).clamp(lo[i], hi[i])).abs())
        .fold(0.0, f64::max)
}

/// Minimize `problem` over its box starting from `z` (projected first),
/// until the projected gradient drops below `tolerance`.
pub fn minimize_box<P: BoxProblem + ?Sized>(
    problem: &mut P,
    z: &mut [f64],
    tolerance: f64,
    max_iterations: usize,
    deadline: Option<Instant>,
) -> InnerReport {
    const ARMIJO: f64 = 1e-4;
    const MAX_BACKTRACKS: usize = 40;
    const ACTIVE_EPS: f64 = 1e-3;

    let n = problem.dim();
    let lo = problem.lower().to_vec();
    let hi = problem.upper().to_vec();
    project(z, &lo, &hi);

    let mut grad = vec![0.0; n];
    let mut step = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut active = vec![false; n];
    let mut hess = BandMatrix::zeros(n, problem.half_bandwidth());
    let mut damping = 0.0;

    let mut iterations = 0;
    loop {
        hess.clear();
        let f = problem.linearize(z, &mut grad, &mut hess);
        let pg = projected_gradient_norm(z, &grad, &lo, &hi);
        let report = |status, iterations| InnerReport {
            status,
            iterations,
            value: f,
            projected_gradient: pg,
        };
        if pg <= tolerance {
            return report(InnerStatus::Optimal, iterations);
        }
        if iterations >= max_iterations {
            return report(InnerStatus::IterationLimit, iterations);
        }
        if deadline.is_some_and(|d| Instant::now() >= d) {
            return report(InnerStatus::TimedOut, iterations);
        }
        iterations += 1;

        // ε-active set: variables pinned at a bound by the gradient.
        let eps = ACTIVE_EPS.min(pg);
        for i in 0..n {
            active[i] = (z[i] - lo[i] <= eps && grad[i] > 0.0) || (hi[i] - z[i] <= eps && grad[i] < 0.0);
        }
        let mut diag_scale = 0.0f64;
        for i in 0..n {
            diag_scale = diag_scale.max(hess.diag(i).abs());
            if active[i] {
                hess.isolate(i);
            }
        }
        let diag_floor = 1e-12 * diag_scale.max(1.0);

        // Newton step on the free variables, scaled gradient on the active ones.
        let base = hess.clone();
        let mut factored = None;
        for _ in 0..30 {
            let mut h = base.clone();
            for i in 0..n {
                let d = h.diag(i).max(diag_floor);
                let bump = d - h.diag(i) + damping;
                h.add(i, i, bump);
            }
            if h.cholesky_in_place().is_ok() {
                factored = Some(h);
                break;
            }
            damping = if damping == 0.0 {
                1e-8 * diag_scale.max(1.0).sqrt()
            } else {
                damping * 10.0
            };
        }
        let Some(factor) = factored else {
            return report(InnerStatus::Stalled, iterations);
        };
        for i in 0..n {
            step[i] = -grad[i];
        }
        factor.cholesky_solve(&mut step);
        damping *= 0.1;
        if damping < 1e-10 * diag_scale.max(1.0).sqrt() {
            damping = 0.0;
        }

        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACKS {
            for i in 0..n {
                trial[i] = (z[i] + alpha * step[i]).clamp(lo[i], hi[i]);
            }
            let predicted: f64 = (0..n).map(|i| grad[i] * (z[i] - trial[i])).sum();
            let f_trial = problem.value(&trial);
            if f_trial.is_finite() && f - f_trial >= ARMIJO * predicted && predicted >= 0.0 {
                accepted = f_trial < f || predicted == 0.0;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // Fall back to a projected gradient step with a unit-curvature guess.
            let mut t = 1.0 / diag_scale.max(1.0);
            for _ in 0..MAX_BACKTRACKS {
                for i in 0..n {
                    trial[i] = (z[i] - t * grad[i]).clamp(lo[i], hi[i]);
                }
                let predicted: f64 = (0..n).map(|i| grad[i] * (z[i] - trial[i])).sum();
                let f_trial = problem.value(&trial);
                if f_trial.is_finite() && f - f_trial >= ARMIJO * predicted && f_trial < f {
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
        }
        if !accepted {
            return report(InnerStatus::Stalled, iterations);
        }
        z.copy_from_slice(&trial);
    }
}

// ---------------------------------------------------------------------------
// Augmented Lagrangian of the OCP in stage order
// ---------------------------------------------------------------------------

const BLOCK: usize = CONTROL_DIM + STATE_DIM;
const HALF_BANDWIDTH: usize = BLOCK + STATE_DIM - 1;

/// Decision vector reordered as `(u_0, ξ_1, u_1, ξ_2, …)`.
fn to_stage_order(problem: &OcpProblem, z: &[f64]) -> Vec<f64> {
    let layout = problem.layout;
    let mut w = vec![0.0; layout.dim()];
    for k in 0..layout.n {
        w[BLOCK * k..BLOCK * k + CONTROL_DIM].copy_from_slice(&z[layout.control(k)..layout.control(k) + CONTROL_DIM]);
        w[BLOCK * k + CONTROL_DIM..BLOCK * (k + 1)].copy_from_slice(&z[layout.state(k)..layout.state(k) + STATE_DIM]);
    }
    w
}

fn from_stage_order(problem: &OcpProblem, w: &[f64]) -> Vec<f64> {
    let layout = problem.layout;
    let mut z = vec![0.0; layout.dim()];
    for k in 0..layout.n {
        z[layout.control(k)..layout.control(k) + CONTROL_DIM].copy_from_slice(&w[BLOCK * k..BLOCK * k + CONTROL_DIM]);
        z[layout.state(k)..layout.state(k) + STATE_DIM].copy_from_slice(&w[BLOCK * k + CONTROL_DIM..BLOCK * (k + 1)]);
    }
    z
}

struct AugmentedLagrangian<'a> {
    problem: &'a OcpProblem,
    multipliers: Vec<f64>,
    penalty: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl<'a> AugmentedLagrangian<'a> {
    fn new(problem: &'a OcpProblem, multipliers: Vec<f64>, penalty: f64) -> Self {
        let (lo, hi) = problem.decision_bounds();
        Self {
            problem,
            multipliers,
            penalty,
            lower: to_stage_order(problem, &lo),
            upper: to_stage_order(problem, &hi),
        }
    }

    fn control(w: &[f64], k: usize) -> Vector3<f64> {
        Vector3::new(w[BLOCK * k], w[BLOCK * k + 1], w[BLOCK * k + 2])
    }

    fn state(&self, w: &[f64], k: usize) -> CombinedState {
        // ξ_k: the fixed initial state for k = 0, else block k-1.
        if k == 0 {
            self.problem.initial_state
        } else {
            let o = BLOCK * (k - 1) + CONTROL_DIM;
            CombinedState::from_slice(&w[o..o + STATE_DIM])
        }
    }

    fn defects(&self, w: &[f64], out: &mut [f64]) {
        let p = self.problem;
        for k in 0..p.layout.n {
            let pred = euler_step_unchecked(
                &self.state(w, k),
                &Self::control(w, k),
                p.horizon.dt,
                &p.robot,
                &p.liquid,
            );
            let o = BLOCK * k + CONTROL_DIM;
            for r in 0..STATE_DIM {
                out[STATE_DIM * k + r] = w[o + r] - pred.to_vector()[r];
            }
        }
    }

    fn cost(&self, w: &[f64]) -> f64 {
        let p = self.problem;
        (0..p.layout.n)
            .map(|k| {
                crate::ocp::stage_cost(
                    &self.state(w, k + 1),
                    &Self::control(w, k),
                    &p.reference.poses[k],
                    &p.weights,
                    &p.robot,
                )
            })
            .sum()
    }
}

impl BoxProblem for AugmentedLagrangian<'_> {
    fn dim(&self) -> usize {
        self.problem.layout.dim()
    }

    fn lower(&self) -> &[f64] {
        &self.lower
    }

    fn upper(&self) -> &[f64] {
        &self.upper
    }

    fn half_bandwidth(&self) -> usize {
        HALF_BANDWIDTH
    }

    fn value(&mut self, w: &[f64]) -> f64 {
        let p = self.problem;
        let mut total = self.cost(w);
        for k in 0..p.layout.n {
            let pred = euler_step_unchecked(
                &self.state(w, k),
                &Self::control(w, k),
                p.horizon.dt,
                &p.robot,
                &p.liquid,
            )
            .to_vector();
            let o = BLOCK * k + CONTROL_DIM;
            for r in 0..STATE_DIM {
                let c = w[o + r] - pred[r];
                total += self.multipliers[STATE_DIM * k + r] * c + 0.5 * self.penalty * c * c;
            }
        }
        total
    }

    fn linearize(&mut self, w: &[f64], grad: &mut [f64], hess: &mut BandMatrix) -> f64 {
        let p = self.problem;
        let wt = &p.weights;
        let rho = self.penalty;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut total = 0.0;

        for k in 0..p.layout.n {
            let u_off = BLOCK * k;
            let x_off = u_off + CONTROL_DIM;
            let u = Self::control(w, k);
            let next = self.state(w, k + 1);

            // Control effort.
            for i in 0..CONTROL_DIM {
                total += wt.r[i] * u[i] * u[i];
                grad[u_off + i] += 2.0 * wt.r[i] * u[i];
                hess.add(u_off + i, u_off + i, 2.0 * wt.r[i]);
            }

            // Tracking, Gauss-Newton through the kinematics.
            let e = tracking_error(&forward_kinematics(&next.q, &p.robot), &p.reference.poses[k]);
            let jac = jacobian(&next.q, &p.robot);
            for i in 0..3 {
                total += wt.q1[i] * e[i] * e[i];
            }
            for a in 0..3 {
                let mut g = 0.0;
                for i in 0..3 {
                    g += 2.0 * wt.q1[i] * jac[(i, a)] * e[i];
                }
                grad[x_off + a] += g;
                for b in 0..=a {
                    let mut h = 0.0;
                    for i in 0..3 {
                        h += 2.0 * wt.q1[i] * jac[(i, a)] * jac[(i, b)];
                    }
                    hess.add(x_off + a, x_off + b, h);
                }
            }

            // Slosh angle.
            let beta = next.slosh.beta;
            total += wt.q2 * beta * beta;
            grad[x_off + 6] += 2.0 * wt.q2 * beta;
            hess.add(x_off + 6, x_off + 6, 2.0 * wt.q2);

            // Defect k = ξ_{k+1} - step(ξ_k, u_k), priced by λ and ρ.
            let prev = self.state(w, k);
            let (pred, a_mat, b_mat) = euler_step_with_jacobians(&prev, &u, p.horizon.dt, &p.robot, &p.liquid);
            let pred = pred.to_vector();
            let mut y = [0.0; STATE_DIM];
            for r in 0..STATE_DIM {
                let c = w[x_off + r] - pred[r];
                let lam = self.multipliers[STATE_DIM * k + r];
                total += lam * c + 0.5 * rho * c * c;
                y[r] = lam + rho * c;
            }

            // Columns of ∂c_k/∂(ξ_k, u_k, ξ_{k+1}) with their global indices.
            let mut cols: Vec<(usize, [f64; STATE_DIM])> = Vec::with_capacity(BLOCK + STATE_DIM);
            if k > 0 {
                let prev_off = BLOCK * (k - 1) + CONTROL_DIM;
                for j in 0..STATE_DIM {
                    cols.push((prev_off + j, std::array::from_fn(|r| -a_mat[(r, j)])));
                }
            }
            for j in 0..CONTROL_DIM {
                cols.push((u_off + j, std::array::from_fn(|r| -b_mat[(r, j)])));
            }
            for j in 0..STATE_DIM {
                cols.push((x_off + j, std::array::from_fn(|r| if r == j { 1.0 } else { 0.0 })));
            }
            for (ia, (idx_a, col_a)) in cols.iter().enumerate() {
                grad[*idx_a] += col_a.iter().zip(&y).map(|(d, yy)| d * yy).sum::<f64>();
                for (idx_b, col_b) in &cols[..=ia] {
                    let dot: f64 = col_a.iter().zip(col_b).map(|(x, y)| x * y).sum();
                    if dot != 0.0 {
                        hess.add(*idx_a, *idx_b, rho * dot);
                    }
                }
            }
        }
        total
    }
}

// ---------------------------------------------------------------------------
// Outer loop
// ---------------------------------------------------------------------------

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solve the OCP from `guess`.
///
/// Never fails once the inputs are validated: on budget exhaustion the last
/// iterate comes back with status `MaxIter`.
pub fn solve(problem: &OcpProblem, guess: &WarmStart, options: &SolverOptions) -> Result<OcpSolution, SolverError> {
    options.validate()?;
    let dim = problem.layout.dim();
    if guess.z.len() != dim {
        return Err(SolverError::DimensionMismatch {
            expected: dim,
            actual: guess.z.len(),
        });
    }
    if let Some(i) = guess.z.iter().position(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteGuess(i));
    }

    let start = Instant::now();
    let deadline = options
        .time_budget
        .is_finite()
        .then(|| start + Duration::from_secs_f64(options.time_budget));

    let m = problem.layout.num_defects();
    let multipliers = guess
        .multipliers
        .as_ref()
        .filter(|l| l.len() == m && l.iter().all(|v| v.is_finite()))
        .cloned()
        .unwrap_or_else(|| vec![0.0; m]);
    let penalty = guess
        .penalty
        .filter(|r| r.is_finite())
        .unwrap_or(options.initial_penalty)
        .clamp(
            options.initial_penalty,
            options.warm_penalty_limit.min(options.max_penalty),
        );

    let mut al = AugmentedLagrangian::new(problem, multipliers, penalty);
    let mut w = to_stage_order(problem, &guess.z);
    let mut defects = vec![0.0; m];
    let mut previous_violation = f64::INFINITY;
    let mut status = SolveStatus::MaxIter;
    let mut outer = 0;
    let mut inner_total = 0;
    let mut violation = f64::INFINITY;

    while outer < options.max_outer_iterations {
        outer += 1;
        let inner = minimize_box(
            &mut al,
            &mut w,
            options.optimality_tolerance,
            options.max_inner_iterations,
            deadline,
        );
        inner_total += inner.iterations;
        al.defects(&w, &mut defects);
        violation = inf_norm(&defects);
        for (lam, c) in al.multipliers.iter_mut().zip(&defects) {
            *lam += al.penalty * c;
        }
        if violation <= options.feasibility_tolerance && inner.projected_gradient <= options.optimality_tolerance {
            status = SolveStatus::Converged;
            break;
        }
        if inner.status == InnerStatus::TimedOut || deadline.is_some_and(|d| Instant::now() >= d) {
            break;
        }
        // Only a finished inner solve says anything about the penalty.
        let inner_done = matches!(inner.status, InnerStatus::Optimal | InnerStatus::Stalled);
        if inner_done && violation > 0.25 * previous_violation && violation > options.feasibility_tolerance {
            if al.penalty >= options.max_penalty {
                status = SolveStatus::InfeasibleBounds;
                break;
            }
            al.penalty = (al.penalty * options.penalty_growth).min(options.max_penalty);
        }
        previous_violation = violation;
    }

    let z = from_stage_order(problem, &w);
    let (controls, states) = problem.layout.split(&z);
    let objective = objective_at(problem, &z).expect("dimension checked");
    Ok(OcpSolution {
        controls,
        states,
        objective,
        status,
        iterations: outer,
        inner_iterations: inner_total,
        max_defect: violation,
        solve_time: start.elapsed(),
        multipliers: al.multipliers,
        penalty: al.penalty,
    })
}

/// First-order optimality measures of a solution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktReport {
    /// ∞-norm of the dynamics defects.
    pub defect_norm: f64,
    /// Largest distance outside the decision box.
    pub bound_violation: f64,
    /// ∞-norm of the projected Lagrangian gradient.
    pub stationarity: f64,
    /// Implied bound multipliers, in decision-vector layout: positive when
    /// the variable presses against its upper bound, negative against its
    /// lower bound, zero when it is interior.
    pub bound_multipliers: Vec<f64>,
}

/// Report defects, bound violation and stationarity for `solution`.
pub fn kkt_report(problem: &OcpProblem, solution: &OcpSolution) -> KktReport {
    let z = solution.decision_vector();
    let (lo, hi) = problem.decision_bounds();
    let defects = dynamics_defects(problem, &z).expect("solution matches layout");
    let bound_violation = z
        .iter()
        .enumerate()
        .map(|(i, &v)| (lo[i] - v).max(v - hi[i]).max(0.0))
        .fold(0.0, f64::max);

    let mut grad = objective_gradient(problem, &z).expect("solution matches layout");
    if solution.multipliers.len() == defects.len() {
        let jac = dynamics_defects_jacobian(problem, &z).expect("solution matches layout");
        let lam = nalgebra::DVector::from_column_slice(&solution.multipliers);
        let jt_lam = jac.transpose() * lam;
        for (g, v) in grad.iter_mut().zip(jt_lam.iter()) {
            *g += v;
        }
    }
    let stationarity = projected_gradient_norm(&z, &grad, &lo, &hi);
    let bound_multipliers = z
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let tight = 1e-9 * (1.0 + v.abs());
            if (v - lo[i]).abs() <= tight || (hi[i] - v).abs() <= tight {
                -grad[i]
            } else {
                0.0
            }
        })
        .collect();

    KktReport {
        defect_norm: inf_norm(&defects),
        bound_violation,
        stationarity,
        bound_multipliers,
    }
}
