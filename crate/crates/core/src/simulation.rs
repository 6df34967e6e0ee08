//! Closed-loop teleoperation simulation.
//!
//! Every control tick: read the operator sample, map it to a target,
//! extrapolate the reference over the horizon, choose the initial state
//! through the feedback gate, warm-start and solve the OCP, then hold the
//! first control over one control period on the plant. The plant integrates
//! the same continuous model with RK4 substeps, so the Euler prediction used
//! by the controller drifts from it and the gate occasionally has to fire.

use std::io::Write;
use std::path::Path;

use log::{debug, warn};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    euler_step_unchecked, rk4_step_unchecked, CombinedState, ControlInput, LiquidParams, SloshState,
};
use crate::error::SimError;
use crate::kinematics::{forward_kinematics, Pose2D, RobotParams};
use crate::nlp_solver::{solve, SolverOptions};
use crate::ocp::{build_problem, shift_warm_start, Bounds, HorizonConfig, Layout, OcpSolution, SolveStatus, Weights};
use crate::operator_input::{
    InputMapper, InputSource, MappingState, OperatorSample, ReferencePredictor, TargetHistory, TimedTarget,
};

/// Per-component thresholds on the joint-state prediction error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateThreshold {
    /// rad
    pub q: f64,
    /// rad/s
    pub qdot: f64,
}

impl Default for GateThreshold {
    fn default() -> Self {
        Self { q: 0.01, qdot: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateOutcome {
    pub q: Vector3<f64>,
    pub qdot: Vector3<f64>,
    pub fired: bool,
}

/// Keep the predicted joint state unless some component of it is further
/// than its threshold from the measurement; then take the measurement.
pub fn feedback_gate(
    predicted_q: &Vector3<f64>,
    predicted_qdot: &Vector3<f64>,
    measured_q: &Vector3<f64>,
    measured_qdot: &Vector3<f64>,
    threshold: &GateThreshold,
) -> GateOutcome {
    let q_dev = (predicted_q - measured_q).amax();
    let qd_dev = (predicted_qdot - measured_qdot).amax();
    let fired = q_dev > threshold.q || qd_dev > threshold.qdot;
    if fired {
        GateOutcome {
            q: *measured_q,
            qdot: *measured_qdot,
            fired,
        }
    } else {
        GateOutcome {
            q: *predicted_q,
            qdot: *predicted_qdot,
            fired,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantIntegrator {
    Rk4,
    /// Same integrator as the controller model; for consistency tests.
    Euler,
}

/// Where the slosh part of the controller's initial state comes from. The
/// liquid is never measured in either case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SloshEstimate {
    /// Integrate the model over the control period with the applied control,
    /// using the plant integrator settings.
    Integrated,
    /// Take the first predicted state of the last plan.
    PlanPrediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub control_rate_hz: f64,
    pub substeps: usize,
    pub plant_integrator: PlantIntegrator,
    pub slosh_estimate: SloshEstimate,
    pub gate: GateThreshold,
    /// Label of the weights in use, for logs.
    pub preset: String,
    pub weights: Weights,
    pub duration: f64,
    pub seed: u64,
    /// Standard deviation of additive joint-angle measurement noise, rad.
    pub noise_q: f64,
    /// Standard deviation of additive joint-velocity measurement noise, rad/s.
    pub noise_qdot: f64,
    pub horizon: HorizonConfig,
    pub bounds: Bounds,
    pub robot: RobotParams,
    pub liquid: LiquidParams,
    pub solver: SolverOptions,
    pub initial_q: [f64; 3],
    /// Device-to-workspace motion scale.
    pub input_scale: f64,
    /// Exponential smoothing of the reference velocity; `None` is off.
    pub velocity_smoothing: Option<f64>,
    /// Drop wall-clock dependence: no solver time budget, solve times
    /// logged as zero. Makes runs reproducible byte for byte.
    pub deterministic: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            control_rate_hz: 30.0,
            substeps: 10,
            plant_integrator: PlantIntegrator::Rk4,
            slosh_estimate: SloshEstimate::Integrated,
            gate: GateThreshold::default(),
            preset: "P1".to_string(),
            weights: Weights::P1,
            duration: 10.0,
            seed: 0,
            noise_q: 0.0,
            noise_qdot: 0.0,
            horizon: HorizonConfig::default(),
            bounds: Bounds::default(),
            robot: RobotParams::default(),
            liquid: LiquidParams::default(),
            solver: SolverOptions::default(),
            initial_q: [-1.4, 2.6, -1.2],
            input_scale: 1.0,
            velocity_smoothing: None,
            deterministic: false,
        }
    }
}

impl SimConfig {
    /// Default configuration with a named weight preset.
    pub fn with_preset(name: &str) -> Result<Self, SimError> {
        Ok(Self {
            preset: name.to_ascii_uppercase(),
            weights: crate::ocp::preset(name)?,
            ..Self::default()
        })
    }

    pub fn period(&self) -> f64 {
        1.0 / self.control_rate_hz
    }

    pub fn ticks(&self) -> usize {
        (self.duration * self.control_rate_hz).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.control_rate_hz > 0.0 && self.control_rate_hz.is_finite()) {
            return bad("control rate must be positive");
        }
        if self.substeps == 0 {
            return bad("at least one plant substep is required");
        }
        if !(self.gate.q >= 0.0 && self.gate.qdot >= 0.0) {
            return bad("gate thresholds must be non-negative");
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return bad("duration must be non-negative");
        }
        if !(self.noise_q >= 0.0 && self.noise_qdot >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if !(self.input_scale.is_finite() && self.input_scale != 0.0) {
            return bad("input scale must be finite and non-zero");
        }
        if let Some(a) = self.velocity_smoothing {
            if !(0.0..=1.0).contains(&a) || a == 0.0 {
                return bad("velocity smoothing must lie in (0, 1]");
            }
        }
        self.horizon.validate()?;
        self.bounds.validate()?;
        self.weights.validate()?;
        self.robot.validate()?;
        self.liquid.validate()?;
        self.solver.validate()?;
        Ok(())
    }
}

/// One control tick: the plant state at the start of the tick and what the
/// controller did with it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TickRecord {
    pub t: f64,
    pub q: Vector3<f64>,
    pub qdot: Vector3<f64>,
    pub beta: f64,
    pub betadot: f64,
    pub pose: Pose2D,
    pub reference: Pose2D,
    pub u: ControlInput,
    pub gate_fired: bool,
    pub solve_ms: f64,
    pub status: SolveStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Termination {
    Completed,
    PlantDiverged {
        t: f64,
        detail: String,
    },
    /// The optimizer could not be run, e.g. on a non-finite initial state.
    SolverFailed {
        t: f64,
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryLog {
    pub records: Vec<TickRecord>,
    pub termination: Termination,
    pub control_rate_hz: f64,
    pub horizon: usize,
    pub preset: String,
}

pub const LOG_HEADER: &str = "t,q1,q2,q3,qd1,qd2,qd3,beta,betadot,x,z,theta,xr,zr,thetar,u1,u2,u3,gate,solve_ms,status";

impl TrajectoryLog {
    pub fn new(control_rate_hz: f64, horizon: usize, preset: &str) -> Self {
        Self {
            records: Vec::new(),
            termination: Termination::Completed,
            control_rate_hz,
            horizon,
            preset: preset.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{LOG_HEADER}")?;
        for r in &self.records {
            writeln!(out, "{}", record_line(r))?;
        }
        out.flush()
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }

    pub fn save_csv(&self, path: &Path) -> std::io::Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// One CSV row in [`LOG_HEADER`] order.
pub fn record_line(r: &TickRecord) -> String {
    let nums = [
        r.t,
        r.q[0],
        r.q[1],
        r.q[2],
        r.qdot[0],
        r.qdot[1],
        r.qdot[2],
        r.beta,
        r.betadot,
        r.pose.x,
        r.pose.z,
        r.pose.theta,
        r.reference.x,
        r.reference.z,
        r.reference.theta,
        r.u[0],
        r.u[1],
        r.u[2],
    ];
    let mut line = nums.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
    line.push_str(&format!(
        ",{},{:.3},{}",
        r.gate_fired as u8,
        r.solve_ms,
        r.status.as_str()
    ));
    line
}

/// The closed loop, advanced one tick at a time. Batch runs and the live
/// service both drive this.
pub struct ClosedLoop {
    config: SimConfig,
    plant: CombinedState,
    slosh_estimate: SloshState,
    mapper: InputMapper,
    mapping: MappingState,
    history: TargetHistory,
    predictor: ReferencePredictor,
    plan: Option<OcpSolution>,
    /// Last solver iterate, converged or not; seeds the next solve.
    iterate: Option<OcpSolution>,
    tick: usize,
    rng: ChaCha8Rng,
    noise: Option<(Normal<f64>, Normal<f64>)>,
    diverged: bool,
}

impl ClosedLoop {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let noise = if config.noise_q > 0.0 || config.noise_qdot > 0.0 {
            let n = |s: f64| Normal::new(0.0, s).map_err(|e| SimError::InvalidConfig(e.to_string()));
            Some((n(config.noise_q)?, n(config.noise_qdot)?))
        } else {
            None
        };
        Ok(Self {
            plant: CombinedState::at_rest(Vector3::from(config.initial_q)),
            slosh_estimate: SloshState::default(),
            mapper: InputMapper {
                scale: config.input_scale,
            },
            mapping: MappingState::default(),
            history: TargetHistory::default(),
            predictor: ReferencePredictor::new(config.velocity_smoothing),
            plan: None,
            iterate: None,
            tick: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            noise,
            diverged: false,
            config,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn plant_state(&self) -> &CombinedState {
        &self.plant
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.config.period()
    }

    pub fn plan(&self) -> Option<&OcpSolution> {
        self.plan.as_ref()
    }

    /// Switch weights; takes effect at the next tick.
    pub fn set_weights(&mut self, label: &str, weights: Weights) -> Result<(), SimError> {
        weights.validate()?;
        self.config.weights = weights;
        self.config.preset = label.to_string();
        Ok(())
    }

    fn measure(&mut self) -> (Vector3<f64>, Vector3<f64>) {
        let mut q = self.plant.q;
        let mut qdot = self.plant.qdot;
        if let Some((nq, nqd)) = &self.noise {
            for i in 0..3 {
                q[i] += nq.sample(&mut self.rng);
                qdot[i] += nqd.sample(&mut self.rng);
            }
        }
        (q, qdot)
    }

    fn integrate(&self, from: &CombinedState, u: &ControlInput) -> CombinedState {
        let cfg = &self.config;
        let h = cfg.period() / cfg.substeps as f64;
        (0..cfg.substeps).fold(*from, |x, _| match cfg.plant_integrator {
            PlantIntegrator::Rk4 => rk4_step_unchecked(&x, u, h, &cfg.robot, &cfg.liquid),
            PlantIntegrator::Euler => euler_step_unchecked(&x, u, h, &cfg.robot, &cfg.liquid),
        })
    }

    /// Run one control tick with the given operator sample. Returns the
    /// record for this tick, or the divergence diagnostic once the plant
    /// state stops being finite.
    pub fn step(&mut self, sample: &OperatorSample) -> Result<TickRecord, Termination> {
        let t = self.time();
        if self.diverged {
            return Err(Termination::PlantDiverged {
                t,
                detail: "loop already terminated".into(),
            });
        }
        let cfg = self.config.clone();
        let (measured_q, measured_qdot) = self.measure();
        let gate = match &self.plan {
            Some(plan) => feedback_gate(
                &plan.states[0].q,
                &plan.states[0].qdot,
                &measured_q,
                &measured_qdot,
                &cfg.gate,
            ),
            None => GateOutcome {
                q: measured_q,
                qdot: measured_qdot,
                fired: false,
            },
        };
        // Map against the pose the controller starts from. Using the measured
        // pose here would leave a standing offset (up to the gate threshold)
        // between the held target and the optimizer's initial state, which
        // the loop then chases indefinitely.
        let current_pose = forward_kinematics(&gate.q, &cfg.robot);

        let (target, mapping) = self.mapper.map(sample, &current_pose, &self.mapping);
        if mapping.is_engaged() != self.mapping.is_engaged() {
            debug!(
                "t={t:.3}: clutch {}",
                if mapping.is_engaged() { "engaged" } else { "released" }
            );
        }
        self.mapping = mapping;
        self.history.push(TimedTarget {
            t,
            pose: target,
            engaged: mapping.is_engaged(),
        });
        let reference = self
            .predictor
            .predict(&self.history, &cfg.horizon)
            .expect("a target was just pushed");

        let x0 = CombinedState {
            q: gate.q,
            qdot: gate.qdot,
            slosh: self.slosh_estimate,
        };

        let problem = build_problem(
            x0,
            reference,
            cfg.weights,
            cfg.bounds,
            cfg.horizon,
            cfg.robot,
            cfg.liquid,
        )
        .expect("configuration validated at construction");
        let warm = self
            .iterate
            .as_ref()
            .filter(|s| s.decision_vector().iter().all(|v| v.is_finite()));
        let guess = shift_warm_start(warm, &problem);
        let mut options = cfg.solver;
        options.time_budget = if cfg.deterministic {
            f64::INFINITY
        } else {
            0.8 * cfg.period()
        };
        let solution = match solve(&problem, &guess, &options) {
            Ok(solution) => solution,
            Err(e) => {
                self.diverged = true;
                return Err(Termination::SolverFailed {
                    t,
                    detail: format!("{e} (initial state {:?})", x0.to_vector().as_slice()),
                });
            }
        };
        let solve_ms = if cfg.deterministic {
            0.0
        } else {
            solution.solve_time.as_secs_f64() * 1e3
        };
        let status = solution.status;

        let plan = match &self.plan {
            Some(previous) if status != SolveStatus::Converged => {
                // Keep following the previous plan, shifted by one tick.
                warn!("t={t:.3}: solver returned {}, following previous plan", status.as_str());
                let shifted = shift_warm_start(Some(previous), &problem);
                let (controls, states) = Layout { n: cfg.horizon.n }.split(&shifted.z);
                OcpSolution {
                    controls,
                    states,
                    multipliers: shifted.multipliers.unwrap_or_default(),
                    ..solution.clone()
                }
            }
            _ => solution.clone(),
        };
        let u = cfg.bounds.clamp_control(&plan.controls[0]);

        let record = TickRecord {
            t,
            q: self.plant.q,
            qdot: self.plant.qdot,
            beta: self.plant.slosh.beta,
            betadot: self.plant.slosh.betadot,
            pose: forward_kinematics(&self.plant.q, &cfg.robot),
            reference: target,
            u,
            gate_fired: gate.fired,
            solve_ms,
            status,
        };

        self.slosh_estimate = match cfg.slosh_estimate {
            SloshEstimate::Integrated => self.integrate(&x0, &u).slosh,
            SloshEstimate::PlanPrediction => plan.states[0].slosh,
        };
        self.plant = self.integrate(&self.plant, &u);
        self.plan = Some(plan);
        self.iterate = Some(solution);
        self.tick += 1;

        if !self.plant.is_finite() {
            self.diverged = true;
            return Err(Termination::PlantDiverged {
                t: self.time(),
                detail: format!("non-finite plant state after applying u = {:?}", u.as_slice()),
            });
        }
        if !self.plant.slosh.is_valid() && record.beta.abs() <= std::f64::consts::FRAC_PI_2 {
            warn!("t={:.3}: slosh angle beyond 90 degrees, liquid spilled", self.time());
        }
        Ok(record)
    }
}

/// Run the loop for `config.duration` seconds against `source`.
pub fn run_closed_loop(config: &SimConfig, source: &mut dyn InputSource) -> Result<TrajectoryLog, SimError> {
    let mut sim = ClosedLoop::new(config.clone())?;
    let mut log = TrajectoryLog::new(config.control_rate_hz, config.horizon.n, &config.preset);
    for _ in 0..config.ticks() {
        let sample = source.sample_at(sim.time());
        match sim.step(&sample) {
            Ok(record) => log.records.push(record),
            Err(termination) => {
                log.termination = termination;
                break;
            }
        }
    }
    Ok(log)
}

/// Summary figures of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Root-mean-square tracking error per axis `(x m, z m, θ rad)`.
    pub rmse: [f64; 3],
    pub max_abs_beta: f64,
    /// Lag maximizing the correlation of actual `x` with reference `x`.
    pub delay_ms: f64,
    pub mean_solve_ms: f64,
    pub p95_solve_ms: f64,
    pub max_solve_ms: f64,
    pub gate_fires: usize,
    /// Ticks whose solve did not converge.
    pub fallback_ticks: usize,
    /// Ticks with the liquid beyond the flat-surface validity range.
    pub spill_ticks: usize,
}

/// Lag, in samples, in `0..=max_lag` at which `actual` best correlates with
/// `reference` (Pearson correlation over the overlapping part). Zero when no
/// lag gives a defined correlation.
pub fn correlation_lag(reference: &[f64], actual: &[f64], max_lag: usize) -> usize {
    let n = reference.len().min(actual.len());
    let mut best = (0, f64::NEG_INFINITY);
    for lag in 0..=max_lag.min(n.saturating_sub(2)) {
        let r = &reference[..n - lag];
        let a = &actual[lag..n];
        let m = r.len() as f64;
        let (mr, ma) = (r.iter().sum::<f64>() / m, a.iter().sum::<f64>() / m);
        let (mut srr, mut saa, mut sra) = (0.0, 0.0, 0.0);
        for (x, y) in r.iter().zip(a) {
            srr += (x - mr) * (x - mr);
            saa += (y - ma) * (y - ma);
            sra += (x - mr) * (y - ma);
        }
        let scale = (srr * saa).sqrt();
        if scale <= 1e-12 * m {
            continue;
        }
        let corr = sra / scale;
        if corr > best.1 + 1e-12 {
            best = (lag, corr);
        }
    }
    best.0
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

pub fn compute_metrics(log: &TrajectoryLog) -> Metrics {
    let n = log.records.len().max(1) as f64;
    let mut se = [0.0; 3];
    for r in &log.records {
        let e = [
            r.pose.x - r.reference.x,
            r.pose.z - r.reference.z,
            r.pose.theta - r.reference.theta,
        ];
        for i in 0..3 {
            se[i] += e[i] * e[i];
        }
    }
    let rmse = se.map(|s| (s / n).sqrt());

    let reference: Vec<f64> = log.records.iter().map(|r| r.reference.x).collect();
    let actual: Vec<f64> = log.records.iter().map(|r| r.pose.x).collect();
    let max_lag = (2.0 * log.control_rate_hz).round() as usize;
    let lag = correlation_lag(&reference, &actual, max_lag.min(reference.len() / 2));

    let mut times: Vec<f64> = log.records.iter().map(|r| r.solve_ms).collect();
    times.sort_by(f64::total_cmp);

    Metrics {
        rmse,
        max_abs_beta: log.records.iter().map(|r| r.beta.abs()).fold(0.0, f64::max),
        delay_ms: lag as f64 * 1e3 / log.control_rate_hz,
        mean_solve_ms: times.iter().sum::<f64>() / n,
        p95_solve_ms: percentile(&times, 0.95),
        max_solve_ms: times.last().copied().unwrap_or(0.0),
        gate_fires: log.records.iter().filter(|r| r.gate_fired).count(),
        fallback_ticks: log
            .records
            .iter()
            .filter(|r| r.status != SolveStatus::Converged)
            .count(),
        spill_ticks: log
            .records
            .iter()
            .filter(|r| r.beta.abs() > std::f64::consts::FRAC_PI_2)
            .count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator_input::Synthetic;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gate_keeps_prediction_within_threshold() {
        let th = GateThreshold::default();
        let q = Vector3::new(0.1, 0.2, 0.3);
        let qd = Vector3::new(0.0, 0.1, 0.0);
        let out = feedback_gate(&q, &qd, &q, &qd, &th);
        assert!(!out.fired);
        assert_eq!(out.q, q);

        let measured = q + Vector3::new(0.0, 0.02, 0.0);
        let out = feedback_gate(&q, &qd, &measured, &qd, &th);
        assert!(out.fired);
        assert_eq!(out.q, measured);

        let measured_qd = qd + Vector3::new(0.1, 0.0, 0.0);
        assert!(feedback_gate(&q, &qd, &q, &measured_qd, &th).fired);

        let zero = GateThreshold { q: 0.0, qdot: 0.0 };
        let out = feedback_gate(&q, &qd, &(q + Vector3::repeat(1e-12)), &qd, &zero);
        assert!(out.fired);
        assert_eq!(out.q, q + Vector3::repeat(1e-12));
    }

    #[test]
    fn correlation_lag_recovers_shift() {
        let reference: Vec<f64> = (0..300).map(|i| Synthetic::RAMP.device_x(i as f64 / 30.0)).collect();
        let mut actual = vec![reference[0]; 3];
        actual.extend_from_slice(&reference[..297]);
        assert_eq!(correlation_lag(&reference, &actual, 60), 3);
        assert_eq!(correlation_lag(&reference, &reference, 60), 0);
        let flat = vec![0.4; 50];
        assert_eq!(correlation_lag(&flat, &flat, 10), 0);
    }

    fn record(t: f64, x: f64, xr: f64, beta: f64) -> TickRecord {
        TickRecord {
            t,
            q: Vector3::zeros(),
            qdot: Vector3::zeros(),
            beta,
            betadot: 0.0,
            pose: Pose2D::new(x, 0.0, 0.0),
            reference: Pose2D::new(xr, 0.0, 0.0),
            u: Vector3::zeros(),
            gate_fired: false,
            solve_ms: 2.0,
            status: SolveStatus::Converged,
        }
    }

    #[test]
    fn metrics_examples() {
        let xr: Vec<f64> = (0..300).map(|i| Synthetic::RAMP.device_x(i as f64 / 30.0)).collect();
        let mut log = TrajectoryLog::new(30.0, 30, "P1");
        log.records = xr
            .iter()
            .enumerate()
            .map(|(i, &x)| record(i as f64 / 30.0, x, x, 0.0))
            .collect();
        let m = compute_metrics(&log);
        assert_eq!(m.rmse, [0.0; 3]);
        assert_eq!(m.delay_ms, 0.0);
        assert_eq!(m.max_abs_beta, 0.0);
        assert_eq!(m.mean_solve_ms, 2.0);

        for i in 0..300 {
            log.records[i].pose.x = xr[i.saturating_sub(3)];
            log.records[i].beta = if i == 40 { -0.2 } else { 0.01 };
        }
        let m = compute_metrics(&log);
        assert_abs_diff_eq!(m.delay_ms, 100.0, epsilon = 1e-9);
        assert_eq!(m.max_abs_beta, 0.2);
        assert!(m.rmse[0] > 0.0);
    }

    #[test]
    fn csv_layout() {
        let mut log = TrajectoryLog::new(30.0, 30, "P1");
        log.records.push(record(0.0, 0.5, 0.5, 0.0));
        let text = log.to_csv_string();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), LOG_HEADER);
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), LOG_HEADER.split(',').count());
        assert_eq!(row[18], "0");
        assert_eq!(row[19], "2.000");
        assert_eq!(row[20], "converged");
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::default().validate().is_ok());
        let bad = SimConfig {
            substeps: 0,
            ..SimConfig::default()
        };
        assert!(ClosedLoop::new(bad).is_err());
        assert!(SimConfig::with_preset("P9").is_err());
        assert_eq!(SimConfig::with_preset("p2").unwrap().weights, Weights::P2);
    }

    #[test]
    fn idle_operator_holds_rest() {
        let cfg = SimConfig {
            duration: 1.0,
            deterministic: true,
            ..SimConfig::default()
        };
        let log = run_closed_loop(&cfg, &mut Synthetic::Idle).unwrap();
        assert_eq!(log.len(), 30);
        assert!(log.records.iter().all(|r| r.u.amax() < 1e-6 && r.beta.abs() < 1e-9));
    }

    #[test]
    fn euler_plant_without_mismatch_never_fires_gate() {
        let cfg = SimConfig {
            duration: 3.0,
            substeps: 1,
            plant_integrator: PlantIntegrator::Euler,
            deterministic: true,
            ..SimConfig::default()
        };
        let log = run_closed_loop(&cfg, &mut { Synthetic::RAMP }).unwrap();
        assert_eq!(log.termination, Termination::Completed);
        assert!(log.records.iter().all(|r| !r.gate_fired));
    }

    #[test]
    fn noise_is_seeded() {
        let cfg = SimConfig {
            duration: 0.5,
            noise_q: 0.02,
            noise_qdot: 0.05,
            deterministic: true,
            ..SimConfig::default()
        };
        let a = run_closed_loop(&cfg, &mut { Synthetic::RAMP }).unwrap();
        let b = run_closed_loop(&cfg, &mut { Synthetic::RAMP }).unwrap();
        assert_eq!(a.to_csv_string(), b.to_csv_string());
        assert!(a.records.iter().any(|r| r.gate_fired));
        let c = run_closed_loop(&SimConfig { seed: 7, ..cfg }, &mut { Synthetic::RAMP }).unwrap();
        assert_ne!(a.to_csv_string(), c.to_csv_string());
    }
}
