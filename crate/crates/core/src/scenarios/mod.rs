//! The monitor + detector pipeline under four architectures:
//!
//! | scenario | monitor        | detector                     | hand-off          |
//! |----------|----------------|------------------------------|-------------------|
//! | 1        | main loop      | inline in the same loop      | none              |
//! | 2        | main loop      | one detached process / batch | pipe per worker   |
//! | 3        | thread         | long-lived thread            | bounded queue     |
//! | 4        | main process   | long-lived child process     | queue + pipes     |
//!
//! Runs use either the real monotonic clock (frames are paced in real time
//! and losses happen physically in the bus FIFO) or a simulated clock, where
//! a discrete-event driver interleaves publishing and reading on the same
//! bus and evaluation takes exactly the configured padding. In both cases
//! verdicts come from the real transport of the chosen architecture.

mod monitor;
mod realtime;
mod simulated;
mod transport;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::monitor::{Batcher, Collected};

use crate::bus::{BusStats, DEFAULT_BUFFER_CAPACITY};
use crate::clock::ClockKind;
use crate::detector::{DetectorConfig, DetectorError, Label, Verdict};
use crate::emulator::{EmulatorError, ReplayConfig, ReplayReport};
use crate::worker::WorkerLauncher;

/// Batches the monitor may queue ahead of the detector (scenarios 3 and 4).
pub const DEFAULT_QUEUE_CAPACITY: usize = 8;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario config: {0}")]
    Config(String),
    #[error(transparent)]
    Emulator(#[from] EmulatorError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("failed to spawn worker: {0}")]
    SpawnFailure(String),
    #[error("channel to detector broken: {0}")]
    ChannelBroken(String),
    #[error(transparent)]
    Bus(#[from] crate::bus::BusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    #[serde(rename = "S1_Inline")]
    S1Inline,
    #[serde(rename = "S2_WorkerPerBatch")]
    S2WorkerPerBatch,
    #[serde(rename = "S3_TwoTasksOneProcess")]
    S3TwoTasksOneProcess,
    #[serde(rename = "S4_TwoProcesses")]
    S4TwoProcesses,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::S1Inline,
        ScenarioKind::S2WorkerPerBatch,
        ScenarioKind::S3TwoTasksOneProcess,
        ScenarioKind::S4TwoProcesses,
    ];

    pub fn number(self) -> u8 {
        match self {
            ScenarioKind::S1Inline => 1,
            ScenarioKind::S2WorkerPerBatch => 2,
            ScenarioKind::S3TwoTasksOneProcess => 3,
            ScenarioKind::S4TwoProcesses => 4,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        Self::ALL.get((n as usize).wrapping_sub(1)).copied()
    }

    pub fn uses_queue(self) -> bool {
        matches!(self, ScenarioKind::S3TwoTasksOneProcess | ScenarioKind::S4TwoProcesses)
    }

    pub fn needs_worker_process(self) -> bool {
        matches!(self, ScenarioKind::S2WorkerPerBatch | ScenarioKind::S4TwoProcesses)
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ScenarioKind::S1Inline => "S1_Inline",
            ScenarioKind::S2WorkerPerBatch => "S2_WorkerPerBatch",
            ScenarioKind::S3TwoTasksOneProcess => "S3_TwoTasksOneProcess",
            ScenarioKind::S4TwoProcesses => "S4_TwoProcesses",
        };
        f.write_str(name)
    }
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse::<u8>()
            .ok()
            .and_then(Self::from_number)
            .or_else(|| Self::ALL.into_iter().find(|k| k.to_string().eq_ignore_ascii_case(s)))
            .ok_or_else(|| format!("unknown scenario {s:?} (expected 1-4)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMode {
    pub kind: ScenarioKind,
    /// Monitor-to-detector queue depth in batches; `None` is unbounded.
    /// Only meaningful for scenarios 3 and 4.
    pub queue_capacity: Option<usize>,
}

impl ScenarioMode {
    pub fn new(kind: ScenarioKind) -> Self {
        ScenarioMode {
            kind,
            queue_capacity: kind.uses_queue().then_some(DEFAULT_QUEUE_CAPACITY),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioOptions {
    pub mode: ScenarioMode,
    /// Depth of the monitor's bus receive FIFO in frames.
    pub buffer_capacity: usize,
    /// Required for scenarios 2 and 4.
    pub launcher: Option<WorkerLauncher>,
    /// How long to wait for outstanding scenario-2 workers at run end.
    pub reap_timeout: Duration,
}

impl ScenarioOptions {
    pub fn new(kind: ScenarioKind) -> Self {
        ScenarioOptions {
            mode: ScenarioMode::new(kind),
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            launcher: None,
            reap_timeout: Duration::from_secs(10),
        }
    }

    pub fn with_launcher(mut self, launcher: WorkerLauncher) -> Self {
        self.launcher = Some(launcher);
        self
    }
}

/// Timing and outcome of one detection window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowRecord {
    pub window: u64,
    pub collect_start_ns: u64,
    pub collect_end_ns: u64,
    pub eval_end_ns: u64,
    pub verdict: Verdict,
}

impl WindowRecord {
    pub fn eval_ns(&self) -> u64 {
        self.eval_end_ns.saturating_sub(self.collect_end_ns)
    }

    pub fn response_ns(&self) -> u64 {
        self.eval_end_ns.saturating_sub(self.collect_start_ns)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub kind: ScenarioKind,
    pub clock: ClockKind,
    pub queue_capacity: Option<usize>,
    pub buffer_capacity: usize,
    pub rate_msgs_per_sec: f64,
    pub detector: DetectorConfig,
    /// Sorted by window index.
    pub windows: Vec<WindowRecord>,
    pub batches_collected: u64,
    pub bus: BusStats,
    pub replay: ReplayReport,
    /// Batches evicted from a full monitor-to-detector queue.
    pub queue_dropped: u64,
    pub workers_spawned: u64,
    pub workers_unreaped: u64,
}

impl RunRecord {
    pub fn published(&self) -> u64 {
        self.bus.published
    }

    /// Frames the monitor's receive FIFO discarded.
    pub fn dropped(&self) -> u64 {
        self.bus.subscriptions.first().map_or(0, |s| s.dropped)
    }

    pub fn loss_ratio(&self) -> f64 {
        if self.published() == 0 {
            0.0
        } else {
            self.dropped() as f64 / self.published() as f64
        }
    }

    pub fn verdicts(&self) -> impl Iterator<Item = &Verdict> {
        self.windows.iter().map(|w| &w.verdict)
    }

    pub fn anomalous_windows(&self) -> Vec<u64> {
        self.verdicts()
            .filter(|v| v.label == Label::Anomalous)
            .map(|v| v.window)
            .collect()
    }
}

/// Runs the configured replay through the chosen architecture until the
/// source is exhausted and every collected batch has been answered (or, for
/// scenario 2, abandoned after the reap timeout).
pub fn run_scenario(
    opts: &ScenarioOptions,
    replay: &ReplayConfig,
    det: &DetectorConfig,
) -> Result<RunRecord, ScenarioError> {
    det.validate()?;
    replay.validate_rate()?;
    if opts.buffer_capacity == 0 {
        return Err(ScenarioError::Config("buffer capacity must be positive".into()));
    }
    if opts.mode.queue_capacity == Some(0) {
        return Err(ScenarioError::Config("queue capacity must be positive".into()));
    }
    if opts.mode.kind.needs_worker_process() && opts.launcher.is_none() {
        return Err(ScenarioError::Config(format!(
            "scenario {} needs a worker executable",
            opts.mode.kind.number()
        )));
    }
    let frames = replay.load_frames()?.frames;
    let mut record = match replay.clock {
        ClockKind::Real => realtime::run(opts, replay.rate_msgs_per_sec, &frames, det)?,
        ClockKind::Simulated => simulated::run(opts, replay.rate_msgs_per_sec, &frames, det)?,
    };
    record.windows.sort_by_key(|w| w.window);
    debug_assert_eq!(
        record.windows.iter().map(|w| w.window).collect::<HashSet<_>>().len(),
        record.windows.len()
    );
    Ok(record)
}

/// Expected fraction of published frames lost, ignoring the receive FIFO.
///
/// Scenario 1 stops reading for `eval` seconds after every `send`-second
/// batch, so `eval / (send + eval)` of the traffic arrives while nobody
/// reads. With a queue (3, 4) nothing is lost while evaluation keeps up;
/// otherwise the queue sheds the excess. Detached workers (2) never block
/// the reader.
pub fn predicted_loss_ratio(kind: ScenarioKind, send_s: f64, eval_s: f64) -> f64 {
    if eval_s <= 0.0 {
        return 0.0;
    }
    match kind {
        ScenarioKind::S1Inline => eval_s / (send_s + eval_s),
        ScenarioKind::S2WorkerPerBatch => 0.0,
        ScenarioKind::S3TwoTasksOneProcess | ScenarioKind::S4TwoProcesses => {
            if eval_s <= send_s {
                0.0
            } else {
                1.0 - send_s / eval_s
            }
        }
    }
}

/// Scenario-1 loss accounting for a receive FIFO of `buffer` frames: of the
/// `rate * eval` frames arriving during each evaluation, `buffer` survive.
pub fn predicted_inline_loss_buffered(rate: f64, window: usize, eval_s: f64, buffer: usize) -> f64 {
    let lost = (rate * eval_s - buffer as f64).max(0.0);
    lost / (window as f64 + lost)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predicted_loss_examples() {
        let s1 = ScenarioKind::S1Inline;
        assert!((predicted_loss_ratio(s1, 1.0, 0.149) - 0.149 / 1.149).abs() < 1e-15);
        assert!((predicted_loss_ratio(s1, 1.0, 0.149) - 0.1297).abs() < 1e-4);
        assert_eq!(predicted_loss_ratio(s1, 1.0, 0.0), 0.0);
        assert_eq!(predicted_loss_ratio(s1, 0.7, 0.7), 0.5);
        assert_eq!(
            predicted_loss_ratio(ScenarioKind::S3TwoTasksOneProcess, 1.0, 0.149),
            0.0
        );
        assert_eq!(predicted_loss_ratio(ScenarioKind::S4TwoProcesses, 1.0, 0.9), 0.0);
        assert!((predicted_loss_ratio(ScenarioKind::S4TwoProcesses, 1.0, 2.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn buffered_model_reduces_to_plain_model() {
        let plain = predicted_loss_ratio(ScenarioKind::S1Inline, 1.0, 0.149);
        let buffered = predicted_inline_loss_buffered(1000.0, 1000, 0.149, 0);
        assert!((plain - buffered).abs() < 1e-12);
        assert!((predicted_inline_loss_buffered(1000.0, 1000, 0.149, 8) - 141.0 / 1141.0).abs() < 1e-12);
        assert_eq!(predicted_inline_loss_buffered(250.0, 1000, 0.03, 8), 0.0);
    }

    #[test]
    fn scenario_parsing() {
        assert_eq!("3".parse::<ScenarioKind>().unwrap(), ScenarioKind::S3TwoTasksOneProcess);
        assert_eq!(
            "s4_twoprocesses".parse::<ScenarioKind>().unwrap(),
            ScenarioKind::S4TwoProcesses
        );
        assert!("5".parse::<ScenarioKind>().is_err());
        assert!("0".parse::<ScenarioKind>().is_err());
        assert_eq!(ScenarioMode::new(ScenarioKind::S1Inline).queue_capacity, None);
        assert_eq!(
            ScenarioMode::new(ScenarioKind::S3TwoTasksOneProcess).queue_capacity,
            Some(8)
        );
    }
}
