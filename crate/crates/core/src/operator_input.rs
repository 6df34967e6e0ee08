//! Operator device samples to end-effector targets, and the constant-velocity
//! reference prediction over the horizon.
//!
//! Mapping is position-position with a clutch: while the clutch is released
//! the target follows the measured pose; on engagement both the device
//! position and the pose are latched, and afterwards device displacements
//! relative to the latch move the target (device right is `+x`, device down
//! is `-z`). The container angle stays at its value from the moment of
//! engagement.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::InputError;
use crate::kinematics::Pose2D;
use crate::ocp::{HorizonConfig, ReferenceTrajectory};

/// One reading of the 2D input device.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OperatorSample {
    pub t: f64,
    pub device_x: f64,
    pub device_z: f64,
    pub clutch: bool,
}

impl OperatorSample {
    pub fn idle(t: f64) -> Self {
        Self { t, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct Latch {
    device_x: f64,
    device_z: f64,
    pose: Pose2D,
}

/// Reference points latched at clutch engagement plus the last target.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MappingState {
    latch: Option<Latch>,
    target: Option<Pose2D>,
}

impl MappingState {
    pub fn is_engaged(&self) -> bool {
        self.latch.is_some()
    }

    pub fn target(&self) -> Option<Pose2D> {
        self.target
    }

    /// Captured container-angle reference, while engaged.
    pub fn theta_reference(&self) -> Option<f64> {
        self.latch.map(|l| l.pose.theta)
    }
}

/// Position-position mapping with a device-to-workspace scale factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputMapper {
    pub scale: f64,
}

impl Default for InputMapper {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

impl InputMapper {
    pub fn map(&self, sample: &OperatorSample, current_pose: &Pose2D, state: &MappingState) -> (Pose2D, MappingState) {
        if !sample.clutch {
            let target = *current_pose;
            return (
                target,
                MappingState {
                    latch: None,
                    target: Some(target),
                },
            );
        }
        let latch = state.latch.unwrap_or(Latch {
            device_x: sample.device_x,
            device_z: sample.device_z,
            pose: *current_pose,
        });
        let target = Pose2D::new(
            latch.pose.x + self.scale * (sample.device_x - latch.device_x),
            latch.pose.z + self.scale * (sample.device_z - latch.device_z),
            latch.pose.theta,
        );
        (
            target,
            MappingState {
                latch: Some(latch),
                target: Some(target),
            },
        )
    }
}

/// [`InputMapper::map`] at unit scale.
pub fn map_input(sample: &OperatorSample, current_pose: &Pose2D, state: &MappingState) -> (Pose2D, MappingState) {
    InputMapper::default().map(sample, current_pose, state)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedTarget {
    pub t: f64,
    pub pose: Pose2D,
    /// Whether the clutch was engaged when this target was produced.
    pub engaged: bool,
}

/// The two most recent targets.
#[derive(Debug, Clone, Default)]
pub struct TargetHistory {
    latest: Option<TimedTarget>,
    previous: Option<TimedTarget>,
}

impl TargetHistory {
    pub fn push(&mut self, target: TimedTarget) {
        self.previous = self.latest.replace(target);
    }

    pub fn latest(&self) -> Option<&TimedTarget> {
        self.latest.as_ref()
    }

    pub fn clear(&mut self) {
        *self = Self::default();
    }

    /// Finite-difference target velocity in the plane. Zero with fewer than
    /// two targets, a non-positive time step, or a released clutch.
    pub fn velocity(&self) -> (f64, f64) {
        match (self.previous, self.latest) {
            (Some(prev), Some(last)) if last.engaged && prev.engaged && last.t > prev.t => {
                let dt = last.t - prev.t;
                ((last.pose.x - prev.pose.x) / dt, (last.pose.z - prev.pose.z) / dt)
            }
            _ => (0.0, 0.0),
        }
    }
}

/// Extrapolate the latest target at constant velocity over the horizon.
/// Stage `k` (1-based) sits `k·dt` ahead of the latest target.
pub fn predict_reference(history: &TargetHistory, horizon: &HorizonConfig) -> Option<ReferenceTrajectory> {
    let latest = history.latest()?;
    Some(extrapolate(latest.pose, history.velocity(), horizon))
}

fn extrapolate(pose: Pose2D, (vx, vz): (f64, f64), horizon: &HorizonConfig) -> ReferenceTrajectory {
    ReferenceTrajectory {
        poses: (1..=horizon.n)
            .map(|k| {
                let ahead = k as f64 * horizon.dt;
                Pose2D::new(pose.x + vx * ahead, pose.z + vz * ahead, pose.theta)
            })
            .collect(),
    }
}

/// Constant-velocity predictor with optional exponential smoothing of the
/// velocity estimate (`alpha` weights the newest difference; `None` or 1
/// uses the raw two-point estimate).
#[derive(Debug, Clone, Default)]
pub struct ReferencePredictor {
    pub smoothing: Option<f64>,
    velocity: (f64, f64),
}

impl ReferencePredictor {
    pub fn new(smoothing: Option<f64>) -> Self {
        Self {
            smoothing,
            velocity: (0.0, 0.0),
        }
    }

    pub fn predict(&mut self, history: &TargetHistory, horizon: &HorizonConfig) -> Option<ReferenceTrajectory> {
        let latest = history.latest()?;
        let raw = history.velocity();
        self.velocity = match self.smoothing {
            Some(alpha) if latest.engaged => (
                alpha * raw.0 + (1.0 - alpha) * self.velocity.0,
                alpha * raw.1 + (1.0 - alpha) * self.velocity.1,
            ),
            _ => raw,
        };
        Some(extrapolate(latest.pose, self.velocity, horizon))
    }
}

// ---------------------------------------------------------------------------
// Sources
// ---------------------------------------------------------------------------

/// Anything that can be polled for the operator sample at a given time.
pub trait InputSource {
    fn sample_at(&mut self, t: f64) -> OperatorSample;
}

/// Deterministic operator motions along the device `x` axis with the clutch
/// held from `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Synthetic {
    /// Linear move of `distance` over `duration`, beginning at `start`, then hold.
    Ramp { start: f64, distance: f64, duration: f64 },
    /// Jump by `distance` at `start`.
    Step { start: f64, distance: f64 },
    /// `amplitude · sin(2π f (t - start))` after `start`.
    Sine { start: f64, amplitude: f64, frequency: f64 },
    /// Clutch never engaged.
    Idle,
}

impl Synthetic {
    pub const RAMP: Synthetic = Synthetic::Ramp {
        start: 0.5,
        distance: 0.3,
        duration: 1.0,
    };
    pub const STEP: Synthetic = Synthetic::Step {
        start: 0.5,
        distance: 0.1,
    };
    pub const SINE: Synthetic = Synthetic::Sine {
        start: 0.5,
        amplitude: 0.1,
        frequency: 0.5,
    };

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "ramp" => Some(Self::RAMP),
            "step" => Some(Self::STEP),
            "sine" => Some(Self::SINE),
            "idle" => Some(Self::Idle),
            _ => None,
        }
    }

    pub fn device_x(&self, t: f64) -> f64 {
        match *self {
            Synthetic::Ramp {
                start,
                distance,
                duration,
            } => distance * ((t - start) / duration).clamp(0.0, 1.0),
            Synthetic::Step { start, distance } => {
                if t >= start {
                    distance
                } else {
                    0.0
                }
            }
            Synthetic::Sine {
                start,
                amplitude,
                frequency,
            } => {
                if t >= start {
                    amplitude * (2.0 * PI * frequency * (t - start)).sin()
                } else {
                    0.0
                }
            }
            Synthetic::Idle => 0.0,
        }
    }
}

impl InputSource for Synthetic {
    fn sample_at(&mut self, t: f64) -> OperatorSample {
        OperatorSample {
            t,
            device_x: self.device_x(t),
            device_z: 0.0,
            clutch: !matches!(self, Synthetic::Idle),
        }
    }
}

/// Recorded samples played back with sample-and-hold.
#[derive(Debug, Clone)]
pub struct ReplaySource {
    samples: Vec<OperatorSample>,
    cursor: usize,
}

impl ReplaySource {
    pub fn new(samples: Vec<OperatorSample>) -> Self {
        Self { samples, cursor: 0 }
    }

    pub fn open(path: &Path) -> Result<Self, InputError> {
        Ok(Self::new(read_replay(path)?))
    }

    pub fn samples(&self) -> &[OperatorSample] {
        &self.samples
    }

    /// Time span covered by the recording.
    pub fn duration(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }
}

impl InputSource for ReplaySource {
    /// Latest recorded sample at or before `t` (the first one before the
    /// recording starts), restamped to `t`.
    fn sample_at(&mut self, t: f64) -> OperatorSample {
        let Some(first) = self.samples.first() else {
            return OperatorSample::idle(t);
        };
        let t_rec = first.t + t;
        if self.cursor >= self.samples.len() || self.samples[self.cursor].t > t_rec {
            self.cursor = 0;
        }
        while self.cursor + 1 < self.samples.len() && self.samples[self.cursor + 1].t <= t_rec + 1e-9 {
            self.cursor += 1;
        }
        OperatorSample {
            t,
            ..self.samples[self.cursor]
        }
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" => Some(true),
        "0" | "false" => Some(false),
        _ => None,
    }
}

/// Read a replay CSV with header `t,device_x,device_z,clutch`.
pub fn read_replay(path: &Path) -> Result<Vec<OperatorSample>, InputError> {
    let file = std::fs::File::open(path).map_err(|source| InputError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let parse_err = |line: u64, message: String| InputError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let expected = ["t", "device_x", "device_z", "clutch"];
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(parse_err(1, format!("expected header {:?}", expected.join(","))));
    }

    let mut out: Vec<OperatorSample> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let num = |i: usize, name: &str| -> Result<f64, InputError> {
            record[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(line, format!("invalid {name}: {:?}", &record[i])))
        };
        let sample = OperatorSample {
            t: num(0, "t")?,
            device_x: num(1, "device_x")?,
            device_z: num(2, "device_z")?,
            clutch: parse_bool(&record[3])
                .ok_or_else(|| parse_err(line, format!("invalid clutch: {:?}", &record[3])))?,
        };
        if let Some(prev) = out.last() {
            if sample.t < prev.t {
                return Err(InputError::NonMonotoneTime {
                    path: path.to_path_buf(),
                    line,
                    t: sample.t,
                    prev: prev.t,
                });
            }
        }
        out.push(sample);
    }
    if out.is_empty() {
        return Err(InputError::Empty(path.to_path_buf()));
    }
    Ok(out)
}

/// Read a replay file and resample it to `rate_hz` by sample-and-hold.
/// Tick `i` is stamped `i / rate_hz` from the start of the recording.
pub fn replay_source(path: &Path, rate_hz: f64) -> Result<Vec<OperatorSample>, InputError> {
    let mut src = ReplaySource::open(path)?;
    let ticks = (src.duration() * rate_hz + 1e-6).floor() as usize + 1;
    Ok((0..ticks).map(|i| src.sample_at(i as f64 / rate_hz)).collect())
}

/// Write samples in the replay CSV format.
pub fn write_replay(path: &Path, samples: &[OperatorSample]) -> Result<(), InputError> {
    let io = |source| InputError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    w.write_record(["t", "device_x", "device_z", "clutch"])
        .map_err(|e| io(e.into()))?;
    for s in samples {
        w.write_record([
            format!("{}", s.t),
            format!("{}", s.device_x),
            format!("{}", s.device_z),
            (s.clutch as u8).to_string(),
        ])
        .map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::io::Write;

    fn sample(t: f64, x: f64, z: f64, clutch: bool) -> OperatorSample {
        OperatorSample {
            t,
            device_x: x,
            device_z: z,
            clutch,
        }
    }

    #[test]
    fn inactive_mode_follows_pose() {
        let pose = Pose2D::new(0.5, 0.3, -1.2);
        let (target, state) = map_input(&sample(0.0, 3.0, 4.0, false), &pose, &MappingState::default());
        assert_eq!(target, pose);
        assert!(!state.is_engaged());
    }

    #[test]
    fn relative_displacement_after_engagement() {
        let pose = Pose2D::new(0.5, 0.3, -1.2);
        let (t0, s) = map_input(&sample(0.0, 0.0, 0.0, true), &pose, &MappingState::default());
        assert_eq!(t0, pose);
        assert_eq!(s.theta_reference(), Some(-1.2));
        // The pose has moved meanwhile; only the latched one matters.
        let moved = Pose2D::new(0.7, 0.1, 0.4);
        let (t1, _) = map_input(&sample(0.1, 0.1, -0.05, true), &moved, &s);
        assert_abs_diff_eq!(t1.x, 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(t1.z, 0.25, epsilon = 1e-15);
        assert_eq!(t1.theta, -1.2);
    }

    #[test]
    fn re_engaging_does_not_jump() {
        let pose = Pose2D::new(0.5, 0.3, 0.0);
        let (_, s) = map_input(&sample(0.0, 0.0, 0.0, true), &pose, &MappingState::default());
        let (_, s) = map_input(&sample(0.1, 0.2, 0.0, true), &pose, &s);
        let (_, s) = map_input(&sample(0.2, 0.2, 0.0, false), &pose, &s);
        let here = Pose2D::new(0.65, 0.28, 0.01);
        let (t, s) = map_input(&sample(0.3, 5.0, -2.0, true), &here, &s);
        assert_eq!(t, here);
        let (t, _) = map_input(&sample(0.4, 5.01, -2.0, true), &here, &s);
        assert_abs_diff_eq!(t.x, 0.66, epsilon = 1e-12);
    }

    #[test]
    fn scale_factor_applies_to_displacement() {
        let mapper = InputMapper { scale: 0.5 };
        let pose = Pose2D::new(0.5, 0.0, 0.0);
        let (_, s) = mapper.map(&sample(0.0, 1.0, 1.0, true), &pose, &MappingState::default());
        let (t, _) = mapper.map(&sample(0.1, 1.2, 1.0, true), &pose, &s);
        assert_abs_diff_eq!(t.x, 0.6, epsilon = 1e-15);
    }

    fn history(targets: &[(f64, f64, f64)]) -> TargetHistory {
        let mut h = TargetHistory::default();
        for &(t, x, z) in targets {
            h.push(TimedTarget {
                t,
                pose: Pose2D::new(x, z, -1.2),
                engaged: true,
            });
        }
        h
    }

    #[test]
    fn single_target_gives_constant_reference() {
        let h = history(&[(0.0, 0.5, 0.3)]);
        let r = predict_reference(&h, &HorizonConfig::default()).unwrap();
        assert_eq!(r.len(), 30);
        assert!(r.poses.iter().all(|p| *p == Pose2D::new(0.5, 0.3, -1.2)));
        assert!(predict_reference(&TargetHistory::default(), &HorizonConfig::default()).is_none());
    }

    #[test]
    fn constant_velocity_extrapolation() {
        let h = history(&[(0.0, 0.5, 0.3), (1.0 / 30.0, 0.51, 0.3)]);
        let (vx, vz) = h.velocity();
        assert_abs_diff_eq!(vx, 0.3, epsilon = 1e-12);
        assert_eq!(vz, 0.0);
        let r = predict_reference(&h, &HorizonConfig::default()).unwrap();
        for (i, p) in r.poses.iter().enumerate() {
            let k = (i + 1) as f64;
            assert_abs_diff_eq!(p.x, 0.51 + 0.3 * k / 30.0, epsilon = 1e-12);
            assert_eq!(p.theta, -1.2);
        }
    }

    #[test]
    fn stationary_or_released_gives_zero_velocity() {
        let h = history(&[(0.0, 0.5, 0.3), (0.1, 0.5, 0.3)]);
        let r = predict_reference(&h, &HorizonConfig::default()).unwrap();
        assert!(r.poses.iter().all(|p| p.x == 0.5 && p.z == 0.3));

        let mut h = history(&[(0.0, 0.5, 0.3)]);
        h.push(TimedTarget {
            t: 0.1,
            pose: Pose2D::new(0.6, 0.3, 0.0),
            engaged: false,
        });
        assert_eq!(h.velocity(), (0.0, 0.0));
    }

    #[test]
    fn smoothing_blends_velocity() {
        let mut p = ReferencePredictor::new(Some(0.5));
        let h = history(&[(0.0, 0.0, 0.0), (0.1, 0.1, 0.0)]);
        let r = p.predict(&h, &HorizonConfig { n: 1, dt: 0.1 }).unwrap();
        // Half of the raw 1 m/s estimate.
        assert_abs_diff_eq!(r.poses[0].x, 0.1 + 0.05, epsilon = 1e-12);
    }

    #[test]
    fn ramp_generator_is_piecewise_linear() {
        let ramp = Synthetic::RAMP;
        assert_eq!(ramp.device_x(0.0), 0.0);
        assert_eq!(ramp.device_x(0.5), 0.0);
        assert_abs_diff_eq!(ramp.device_x(1.0), 0.15, epsilon = 1e-12);
        assert_abs_diff_eq!(ramp.device_x(1.5), 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(ramp.device_x(7.0), 0.3, epsilon = 1e-12);
        let mut src = Synthetic::RAMP;
        assert!(src.sample_at(0.0).clutch);
        assert!(!Synthetic::Idle.sample_at(1.0).clutch);
        assert!(Synthetic::by_name("nope").is_none());
    }

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn replay_resamples_to_control_rate() {
        let mut body = String::from("t,device_x,device_z,clutch\n");
        for i in 0..300 {
            body.push_str(&format!("{},{},0,1\n", i as f64 / 30.0, i as f64 * 0.001));
        }
        let f = write(&body);
        let samples = replay_source(f.path(), 30.0).unwrap();
        assert_eq!(samples.len(), 300);
        assert_abs_diff_eq!(samples[150].device_x, 0.15, epsilon = 1e-12);

        // A slower recording is held between its samples.
        let f = write("t,device_x,device_z,clutch\n0,0,0,true\n0.5,1,0,true\n1.0,2,0,false\n");
        let samples = replay_source(f.path(), 10.0).unwrap();
        assert_eq!(samples.len(), 11);
        assert_eq!(samples[4].device_x, 0.0);
        assert_eq!(samples[5].device_x, 1.0);
        assert!(!samples[10].clutch);
    }

    #[test]
    fn replay_errors_carry_line_numbers() {
        let f = write("t,device_x,device_z,clutch\n0,0,0,1\n0.1,abc,0,1\n");
        match read_replay(f.path()) {
            Err(InputError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let f = write("t,device_x,device_z,clutch\n0.2,0,0,1\n0.1,0,0,1\n");
        assert!(matches!(
            read_replay(f.path()),
            Err(InputError::NonMonotoneTime { line: 3, .. })
        ));
        let f = write("time,x,z,c\n0,0,0,1\n");
        assert!(matches!(read_replay(f.path()), Err(InputError::Parse { line: 1, .. })));
        assert!(matches!(
            read_replay(Path::new("/definitely/not/here.csv")),
            Err(InputError::Io { .. })
        ));
    }

    #[test]
    fn replay_write_read_round_trip() {
        let samples: Vec<_> = (0..5)
            .map(|i| sample(i as f64 * 0.1, 0.01 * i as f64, -0.02, i % 2 == 0))
            .collect();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_replay(f.path(), &samples).unwrap();
        assert_eq!(read_replay(f.path()).unwrap(), samples);
    }

    proptest! {
        #[test]
        fn mapping_ignores_device_offset(offset_x in -5.0..5.0f64, offset_z in -5.0..5.0f64,
                                         path in prop::collection::vec((-0.3..0.3f64, -0.3..0.3f64, any::<bool>()), 1..20)) {
            let pose = Pose2D::new(0.5, 0.1, 0.0);
            let mut a = MappingState::default();
            let mut b = MappingState::default();
            for (i, &(x, z, c)) in path.iter().enumerate() {
                let t = i as f64;
                let (ta, na) = map_input(&sample(t, x, z, c), &pose, &a);
                let (tb, nb) = map_input(&sample(t, x + offset_x, z + offset_z, c), &pose, &b);
                prop_assert!((ta.x - tb.x).abs() < 1e-9 && (ta.z - tb.z).abs() < 1e-9);
                a = na;
                b = nb;
            }
        }

        #[test]
        fn clutch_transitions_are_continuous(x in -1.0..1.0f64, z in -1.0..1.0f64,
                                             px in 0.2..0.8f64, pz in -0.3..0.3f64) {
            // Engaging or releasing leaves the target at the current pose.
            let pose = Pose2D::new(px, pz, 0.1);
            let (t, s) = map_input(&sample(0.0, x, z, true), &pose, &MappingState::default());
            prop_assert_eq!(t, pose);
            let (t, _) = map_input(&sample(0.1, x, z, false), &pose, &s);
            prop_assert_eq!(t, pose);
        }
    }
}
