//! The control thread and the two handoff points it shares with the network
//! side: a latest-value inbound slot and a drop-oldest outbound queue.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use antislosh_core::ocp::Weights;
use antislosh_core::operator_input::OperatorSample;
use antislosh_core::simulation::{record_line, ClosedLoop, SimConfig, Termination, LOG_HEADER};
use axum::extract::ws::Utf8Bytes;
use tokio::sync::{broadcast, watch};

use crate::messages::{ErrorCode, OutboundMessage, StateMessage};

/// Most recent operator sample. Writers overwrite, the control loop reads
/// whatever is current at the tick boundary.
#[derive(Debug)]
pub struct SampleSlot(watch::Sender<OperatorSample>);

impl Default for SampleSlot {
    fn default() -> Self {
        Self(watch::Sender::new(OperatorSample::default()))
    }
}

impl SampleSlot {
    pub fn publish(&self, sample: OperatorSample) {
        self.0.send_replace(sample);
    }

    pub fn latest(&self) -> OperatorSample {
        *self.0.borrow()
    }

    /// Keep the device position but let go of the clutch.
    pub fn release_clutch(&self) {
        self.0.send_modify(|s| s.clutch = false);
    }
}

/// State shared between the control thread and the socket sessions.
#[derive(Debug)]
pub struct Shared {
    pub sample: SampleSlot,
    pending_preset: Mutex<Option<(String, Weights)>>,
    pub frames: broadcast::Sender<Utf8Bytes>,
    pub session_active: AtomicBool,
    ticks: AtomicU64,
    stop: AtomicBool,
}

impl Shared {
    /// `queue` is the number of outbound frames kept for a slow client
    /// before the oldest are dropped.
    pub fn new(queue: usize) -> Self {
        let (frames, _) = broadcast::channel(queue.max(1));
        Self {
            sample: SampleSlot::default(),
            pending_preset: Mutex::new(None),
            frames,
            session_active: AtomicBool::new(false),
            ticks: AtomicU64::new(0),
            stop: AtomicBool::new(false),
        }
    }

    /// Queue a weight change for the next tick. A later request replaces an
    /// unapplied earlier one.
    pub fn request_preset(&self, label: String, weights: Weights) {
        *self.pending_preset.lock().unwrap_or_else(|e| e.into_inner()) = Some((label, weights));
    }

    fn take_preset(&self) -> Option<(String, Weights)> {
        self.pending_preset.lock().unwrap_or_else(|e| e.into_inner()).take()
    }

    pub fn ticks(&self) -> u64 {
        self.ticks.load(Ordering::Acquire)
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::Release);
    }

    fn stopped(&self) -> bool {
        self.stop.load(Ordering::Acquire)
    }

    fn broadcast(&self, msg: &OutboundMessage) {
        // No subscribers is fine: the loop runs without a client.
        let _ = self.frames.send(msg.to_json().into());
    }
}

/// Tick log written while the service runs.
pub struct SessionLog {
    out: BufWriter<File>,
}

impl SessionLog {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{LOG_HEADER}")?;
        Ok(Self { out })
    }
}

/// Run ticks at the configured rate until [`Shared::stop`]. Overruns are not
/// caught up: the next tick starts immediately and the schedule restarts
/// from there.
pub fn run(config: SimConfig, shared: Arc<Shared>, mut log: Option<SessionLog>) -> std::io::Result<()> {
    let period = Duration::from_secs_f64(config.period());
    let mut sim = ClosedLoop::new(config).expect("config validated before start");
    let mut next = Instant::now();
    while !shared.stopped() {
        if let Some((label, weights)) = shared.take_preset() {
            sim.set_weights(&label, weights).expect("preset weights are valid");
        }
        let sample = OperatorSample {
            t: sim.time(),
            ..shared.sample.latest()
        };
        match sim.step(&sample) {
            Ok(record) => {
                if let Some(log) = &mut log {
                    writeln!(log.out, "{}", record_line(&record))?;
                }
                let preset = &sim.config().preset;
                shared.broadcast(&OutboundMessage::State(StateMessage::from_record(&record, preset)));
            }
            Err(termination) => {
                let detail = match termination {
                    Termination::PlantDiverged { t, detail } | Termination::SolverFailed { t, detail } => {
                        format!("t = {t:.3} s: {detail}")
                    }
                    Termination::Completed => "loop ended".to_string(),
                };
                log::error!("controller reset: {detail}");
                shared.broadcast(&OutboundMessage::error(
                    ErrorCode::PlantDiverged,
                    format!("control loop stopped ({detail}); controller reset to the start pose"),
                ));
                let config = sim.config().clone();
                sim = ClosedLoop::new(config).expect("config validated before start");
            }
        }
        shared.ticks.fetch_add(1, Ordering::AcqRel);

        next += period;
        let now = Instant::now();
        if next > now {
            std::thread::sleep(next - now);
        } else {
            next = now;
        }
    }
    if let Some(mut log) = log {
        log.out.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_keeps_only_the_latest_sample() {
        let slot = SampleSlot::default();
        let first = OperatorSample {
            t: 0.0,
            device_x: 0.1,
            device_z: 0.0,
            clutch: true,
        };
        let second = OperatorSample { device_x: 0.2, ..first };
        slot.publish(first);
        slot.publish(second);
        assert_eq!(slot.latest(), second);
        slot.release_clutch();
        assert_eq!(
            slot.latest(),
            OperatorSample {
                clutch: false,
                ..second
            }
        );
    }

    #[test]
    fn later_preset_request_wins() {
        let shared = Shared::new(4);
        shared.request_preset("P2".into(), Weights::P2);
        shared.request_preset("P1".into(), Weights::P1);
        assert_eq!(shared.take_preset(), Some(("P1".to_string(), Weights::P1)));
        assert_eq!(shared.take_preset(), None);
    }

    #[test]
    fn slow_subscriber_loses_oldest_frames() {
        let shared = Shared::new(2);
        let mut rx = shared.frames.subscribe();
        for i in 0..5 {
            let _ = shared.frames.send(format!("{i}").into());
        }
        assert!(matches!(rx.try_recv(), Err(broadcast::error::TryRecvError::Lagged(3))));
        assert_eq!(rx.try_recv().unwrap().as_str(), "3");
        assert_eq!(rx.try_recv().unwrap().as_str(), "4");
    }

    #[test]
    fn loop_ticks_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("session.csv");
        let shared = Arc::new(Shared::new(8));
        let config = SimConfig {
            control_rate_hz: 200.0,
            ..SimConfig::default()
        };
        let worker = {
            let shared = shared.clone();
            let log = SessionLog::create(&path).unwrap();
            std::thread::spawn(move || run(config, shared, Some(log)))
        };
        while shared.ticks() < 10 {
            std::thread::sleep(Duration::from_millis(5));
        }
        shared.stop();
        worker.join().unwrap().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(LOG_HEADER));
        assert_eq!(lines.count() as u64, shared.ticks());
    }
}
