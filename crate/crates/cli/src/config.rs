//! Flat run configuration. Every key has a default, so an empty file (or no
//! file) describes the standard scene; command line flags override file
//! values.

use std::path::{Path, PathBuf};

use antislosh_core::dynamics::LiquidParams;
use antislosh_core::kinematics::RobotParams;
use antislosh_core::ocp::{preset, Bounds, HorizonConfig, Weights};
use antislosh_core::operator_input::{InputSource, ReplaySource, Synthetic};
use antislosh_core::simulation::{GateThreshold, PlantIntegrator, SimConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `P1` or `P2`; ignored when `weights_file` is set.
    pub preset: String,
    /// TOML file with `q1`, `q2`, `r`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights_file: Option<PathBuf>,

    /// Generator name (`ramp`, `step`, `sine`, `idle`) or replay CSV path.
    pub input: String,
    /// Generator start time, s.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_start: Option<f64>,
    /// Ramp/step distance or sine amplitude, m.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_distance: Option<f64>,
    /// Ramp duration, s.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_duration: Option<f64>,
    /// Sine frequency, Hz.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_frequency: Option<f64>,
    pub input_scale: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub velocity_smoothing: Option<f64>,

    pub duration: f64,
    pub horizon: usize,
    pub dt: f64,
    pub control_rate_hz: f64,
    pub substeps: usize,
    pub plant_integrator: PlantIntegrator,
    pub gate_q: f64,
    pub gate_qdot: f64,
    pub seed: u64,
    pub noise_q: f64,
    pub noise_qdot: f64,
    pub deterministic: bool,
    pub initial_q: [f64; 3],

    pub link_lengths: [f64; 3],
    pub pendulum_length: f64,
    pub fill_height: f64,
    pub liquid_mass: f64,
    pub damping: f64,
    pub gravity: f64,

    pub q_min: [f64; 3],
    pub q_max: [f64; 3],
    pub qdot_min: [f64; 3],
    pub qdot_max: [f64; 3],
    pub u_min: [f64; 3],
    pub u_max: [f64; 3],

    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics_out: Option<PathBuf>,
    pub host: String,
    pub port: u16,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        let robot = RobotParams::default();
        let liquid = LiquidParams::default();
        let bounds = Bounds::default();
        Self {
            preset: sim.preset,
            weights_file: None,
            input: "ramp".into(),
            input_start: None,
            input_distance: None,
            input_duration: None,
            input_frequency: None,
            input_scale: sim.input_scale,
            velocity_smoothing: sim.velocity_smoothing,
            duration: sim.duration,
            horizon: sim.horizon.n,
            dt: sim.horizon.dt,
            control_rate_hz: sim.control_rate_hz,
            substeps: sim.substeps,
            plant_integrator: sim.plant_integrator,
            gate_q: sim.gate.q,
            gate_qdot: sim.gate.qdot,
            seed: sim.seed,
            noise_q: sim.noise_q,
            noise_qdot: sim.noise_qdot,
            deterministic: sim.deterministic,
            initial_q: sim.initial_q,
            link_lengths: [robot.l1, robot.l2, robot.l3],
            pendulum_length: liquid.l,
            fill_height: liquid.h,
            liquid_mass: liquid.m,
            damping: liquid.d,
            gravity: liquid.g,
            q_min: bounds.q_min,
            q_max: bounds.q_max,
            qdot_min: bounds.qdot_min,
            qdot_max: bounds.qdot_max,
            u_min: bounds.u_min,
            u_max: bounds.u_max,
            out: None,
            metrics_out: None,
            host: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    /// Weights and their log label.
    pub fn weights(&self) -> Result<(String, Weights), CliError> {
        match &self.weights_file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read weights file {}: {e}", path.display())))?;
                let weights: Weights =
                    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                Ok(("custom".into(), weights))
            }
            None => {
                let weights = preset(&self.preset).map_err(|e| CliError::Usage(e.to_string()))?;
                Ok((self.preset.trim().to_ascii_uppercase(), weights))
            }
        }
    }

    pub fn sim_config(&self) -> Result<SimConfig, CliError> {
        let (label, weights) = self.weights()?;
        let [l1, l2, l3] = self.link_lengths;
        let sim = SimConfig {
            control_rate_hz: self.control_rate_hz,
            substeps: self.substeps,
            plant_integrator: self.plant_integrator,
            gate: GateThreshold {
                q: self.gate_q,
                qdot: self.gate_qdot,
            },
            preset: label,
            weights,
            duration: self.duration,
            seed: self.seed,
            noise_q: self.noise_q,
            noise_qdot: self.noise_qdot,
            horizon: HorizonConfig {
                n: self.horizon,
                dt: self.dt,
            },
            bounds: Bounds {
                q_min: self.q_min,
                q_max: self.q_max,
                qdot_min: self.qdot_min,
                qdot_max: self.qdot_max,
                u_min: self.u_min,
                u_max: self.u_max,
            },
            robot: RobotParams { l1, l2, l3 },
            liquid: LiquidParams {
                l: self.pendulum_length,
                h: self.fill_height,
                m: self.liquid_mass,
                d: self.damping,
                g: self.gravity,
            },
            initial_q: self.initial_q,
            input_scale: self.input_scale,
            velocity_smoothing: self.velocity_smoothing,
            deterministic: self.deterministic,
            ..SimConfig::default()
        };
        sim.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(sim)
    }

    /// The configured synthetic generator, if `input` names one.
    pub fn synthetic(&self) -> Option<Synthetic> {
        let mut gen = Synthetic::by_name(&self.input.trim().to_ascii_lowercase())?;
        match &mut gen {
            Synthetic::Ramp {
                start,
                distance,
                duration,
            } => {
                *start = self.input_start.unwrap_or(*start);
                *distance = self.input_distance.unwrap_or(*distance);
                *duration = self.input_duration.unwrap_or(*duration);
            }
            Synthetic::Step { start, distance } => {
                *start = self.input_start.unwrap_or(*start);
                *distance = self.input_distance.unwrap_or(*distance);
            }
            Synthetic::Sine {
                start,
                amplitude,
                frequency,
            } => {
                *start = self.input_start.unwrap_or(*start);
                *amplitude = self.input_distance.unwrap_or(*amplitude);
                *frequency = self.input_frequency.unwrap_or(*frequency);
            }
            Synthetic::Idle => {}
        }
        Some(gen)
    }

    pub fn input_source(&self) -> Result<Box<dyn InputSource>, CliError> {
        if let Some(gen) = self.synthetic() {
            if let Synthetic::Ramp { duration, .. } = gen {
                if !(duration > 0.0) {
                    return Err(CliError::Usage("ramp duration must be positive".into()));
                }
            }
            return Ok(Box::new(gen));
        }
        let path = Path::new(&self.input);
        if !path.is_file() {
            return Err(CliError::Usage(format!(
                "input {} is neither a generator (ramp, step, sine, idle) nor an existing file",
                path.display()
            )));
        }
        let source = ReplaySource::open(path).map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(Box::new(source))
    }
}
