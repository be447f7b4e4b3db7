//! Hand-off from the monitor to the detector, one implementation per
//! architecture.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::monitor::Collected;
use super::{ScenarioError, ScenarioKind, WindowRecord};
use crate::buffer::{Bounded, OverflowPolicy};
use crate::can_frame::{write_batch, FrameBatch};
use crate::clock::Clock;
use crate::detector::{Detector, DetectorConfig, VerdictLine};
use crate::worker::WorkerLauncher;

#[derive(Debug, Default)]
pub(super) struct Outcome {
    pub windows: Vec<WindowRecord>,
    pub queue_dropped: u64,
    pub workers_spawned: u64,
    pub workers_unreaped: u64,
}

pub(super) trait Transport {
    /// Called by the monitor for every complete window. Must not block on
    /// evaluation except in the inline architecture.
    fn submit(&mut self, collected: Collected) -> Result<(), ScenarioError>;

    /// Waits for outstanding work after the last window.
    fn finish(self: Box<Self>, reap_timeout: Duration) -> Result<Outcome, ScenarioError>;
}

pub(super) fn build(
    kind: ScenarioKind,
    queue_capacity: Option<usize>,
    launcher: Option<&WorkerLauncher>,
    det: &DetectorConfig,
    clock: Arc<dyn Clock>,
) -> Result<Box<dyn Transport>, ScenarioError> {
    let launcher = || {
        launcher
            .cloned()
            .ok_or_else(|| ScenarioError::Config(format!("scenario {} needs a worker executable", kind.number())))
    };
    Ok(match kind {
        ScenarioKind::S1Inline => Box::new(Inline {
            detector: Detector::new(det.clone())?,
            clock,
            windows: Vec::new(),
        }),
        ScenarioKind::S2WorkerPerBatch => Box::new(WorkerPerBatch::new(launcher()?, det.clone(), clock)),
        ScenarioKind::S3TwoTasksOneProcess => Box::new(ThreadQueue::start(queue_capacity, det.clone(), clock)?),
        ScenarioKind::S4TwoProcesses => Box::new(ProcessStream::start(&launcher()?, queue_capacity, det, clock)?),
    })
}

fn record(c: &Collected, verdict: crate::detector::Verdict, eval_end_ns: u64) -> WindowRecord {
    WindowRecord {
        window: c.batch.window_index(),
        collect_start_ns: c.collect_start_ns,
        collect_end_ns: c.collect_end_ns,
        eval_end_ns,
        verdict,
    }
}

fn join<T>(handle: JoinHandle<T>, what: &str) -> Result<T, ScenarioError> {
    handle
        .join()
        .map_err(|_| ScenarioError::ChannelBroken(format!("{what} thread panicked")))
}

struct Inline {
    detector: Detector,
    clock: Arc<dyn Clock>,
    windows: Vec<WindowRecord>,
}

impl Transport for Inline {
    fn submit(&mut self, c: Collected) -> Result<(), ScenarioError> {
        let verdict = self.detector.evaluate(&c.batch, &*self.clock)?;
        let end = verdict.eval_finished_ns;
        self.windows.push(record(&c, verdict, end));
        Ok(())
    }

    fn finish(self: Box<Self>, _: Duration) -> Result<Outcome, ScenarioError> {
        Ok(Outcome {
            windows: self.windows,
            ..Outcome::default()
        })
    }
}

struct ThreadQueue {
    queue: Arc<Bounded<Collected>>,
    handle: JoinHandle<Result<Vec<WindowRecord>, ScenarioError>>,
}

impl ThreadQueue {
    fn start(capacity: Option<usize>, det: DetectorConfig, clock: Arc<dyn Clock>) -> Result<Self, ScenarioError> {
        let mut detector = Detector::new(det)?;
        let queue = Arc::new(Bounded::<Collected>::new(capacity, OverflowPolicy::DropOldest));
        let rx = Arc::clone(&queue);
        let handle = std::thread::Builder::new()
            .name("detector".into())
            .spawn(move || {
                let mut windows = Vec::new();
                while let Ok(c) = rx.pop(None) {
                    let verdict = detector.evaluate(&c.batch, &*clock)?;
                    let end = verdict.eval_finished_ns;
                    windows.push(record(&c, verdict, end));
                }
                Ok(windows)
            })
            .map_err(|e| ScenarioError::SpawnFailure(e.to_string()))?;
        Ok(ThreadQueue { queue, handle })
    }
}

impl Transport for ThreadQueue {
    fn submit(&mut self, c: Collected) -> Result<(), ScenarioError> {
        if self.handle.is_finished() {
            return Err(ScenarioError::ChannelBroken("detector thread exited".into()));
        }
        self.queue.push(c);
        Ok(())
    }

    fn finish(self: Box<Self>, _: Duration) -> Result<Outcome, ScenarioError> {
        self.queue.close();
        let windows = join(self.handle, "detector")??;
        Ok(Outcome {
            windows,
            queue_dropped: self.queue.counters().dropped,
            ..Outcome::default()
        })
    }
}

type CollectTimes = Arc<Mutex<HashMap<u64, (u64, u64)>>>;

struct ProcessStream {
    child: Child,
    queue: Arc<Bounded<Collected>>,
    writer: JoinHandle<Result<(), ScenarioError>>,
    reader: JoinHandle<Result<Vec<WindowRecord>, ScenarioError>>,
}

impl ProcessStream {
    fn start(
        launcher: &WorkerLauncher,
        capacity: Option<usize>,
        det: &DetectorConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ScenarioError> {
        let mut child = launcher
            .command(det, false)
            .spawn()
            .map_err(|e| ScenarioError::SpawnFailure(format!("{}: {e}", launcher.program.display())))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let queue = Arc::new(Bounded::new(capacity, OverflowPolicy::DropOldest));
        let times: CollectTimes = Arc::default();
        let writer = {
            let queue = Arc::clone(&queue);
            let times = Arc::clone(&times);
            std::thread::Builder::new()
                .name("ipc-writer".into())
                .spawn(move || stream_batches(&queue, &times, stdin))
        };
        let writer = writer.map_err(|e| ScenarioError::SpawnFailure(e.to_string()))?;
        let reader = std::thread::Builder::new()
            .name("ipc-reader".into())
            .spawn(move || read_verdicts(stdout, &times, &*clock))
            .map_err(|e| ScenarioError::SpawnFailure(e.to_string()))?;
        Ok(ProcessStream {
            child,
            queue,
            writer,
            reader,
        })
    }
}

fn stream_batches(queue: &Bounded<Collected>, times: &CollectTimes, stdin: ChildStdin) -> Result<(), ScenarioError> {
    let mut out = BufWriter::new(stdin);
    while let Ok(c) = queue.pop(None) {
        times
            .lock()
            .unwrap()
            .insert(c.batch.window_index(), (c.collect_start_ns, c.collect_end_ns));
        write_batch(&mut out, &c.batch)
            .and_then(|_| out.flush())
            .map_err(|e| ScenarioError::ChannelBroken(format!("writing to detector process: {e}")))?;
    }
    Ok(())
}

fn read_verdicts(
    stdout: ChildStdout,
    times: &CollectTimes,
    clock: &dyn Clock,
) -> Result<Vec<WindowRecord>, ScenarioError> {
    let mut windows = Vec::new();
    for line in BufReader::new(stdout).lines() {
        let line = line.map_err(|e| ScenarioError::ChannelBroken(format!("reading detector process: {e}")))?;
        let now = clock.now_ns();
        let parsed = VerdictLine::parse(&line)
            .map_err(|e| ScenarioError::ChannelBroken(format!("bad verdict line {line:?}: {e}")))?;
        let (start, end) = times
            .lock()
            .unwrap()
            .remove(&parsed.t)
            .ok_or_else(|| ScenarioError::ChannelBroken(format!("verdict for unknown window {}", parsed.t)))?;
        windows.push(WindowRecord {
            window: parsed.t,
            collect_start_ns: start,
            collect_end_ns: end,
            eval_end_ns: now,
            verdict: parsed.into_verdict(now),
        });
    }
    Ok(windows)
}

impl Transport for ProcessStream {
    fn submit(&mut self, c: Collected) -> Result<(), ScenarioError> {
        if self.writer.is_finished() {
            return Err(ScenarioError::ChannelBroken("detector process pipe closed".into()));
        }
        self.queue.push(c);
        Ok(())
    }

    fn finish(mut self: Box<Self>, _: Duration) -> Result<Outcome, ScenarioError> {
        self.queue.close();
        let written = join(self.writer, "ipc writer")?;
        let windows = join(self.reader, "ipc reader")?;
        let status = self
            .child
            .wait()
            .map_err(|e| ScenarioError::ChannelBroken(format!("waiting for detector process: {e}")))?;
        written?;
        let windows = windows?;
        if !status.success() {
            return Err(ScenarioError::ChannelBroken(format!(
                "detector process exited with {status}"
            )));
        }
        Ok(Outcome {
            windows,
            queue_dropped: self.queue.counters().dropped,
            ..Outcome::default()
        })
    }
}

struct WorkerPerBatch {
    launcher: WorkerLauncher,
    det: DetectorConfig,
    clock: Arc<dyn Clock>,
    previous: Option<FrameBatch>,
    tx: mpsc::Sender<Result<WindowRecord, ScenarioError>>,
    rx: mpsc::Receiver<Result<WindowRecord, ScenarioError>>,
    spawned: u64,
}

impl WorkerPerBatch {
    fn new(launcher: WorkerLauncher, det: DetectorConfig, clock: Arc<dyn Clock>) -> Self {
        let (tx, rx) = mpsc::channel();
        WorkerPerBatch {
            launcher,
            det,
            clock,
            previous: None,
            tx,
            rx,
            spawned: 0,
        }
    }
}

/// Runs one short-lived worker: it is sent the previous window (to prime
/// its state) and the current one, and answers with a single verdict.
fn one_shot(
    launcher: &WorkerLauncher,
    det: &DetectorConfig,
    previous: Option<&FrameBatch>,
    c: &Collected,
    clock: &dyn Clock,
) -> Result<WindowRecord, ScenarioError> {
    let mut child = launcher
        .command(det, previous.is_some())
        .spawn()
        .map_err(|e| ScenarioError::SpawnFailure(format!("{}: {e}", launcher.program.display())))?;
    let broken =
        |e: std::io::Error| ScenarioError::ChannelBroken(format!("worker for window {}: {e}", c.batch.window_index()));
    {
        let mut stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        if let Some(prev) = previous {
            write_batch(&mut stdin, prev).map_err(broken)?;
        }
        write_batch(&mut stdin, &c.batch)
            .and_then(|_| stdin.flush())
            .map_err(broken)?;
    }
    let mut text = String::new();
    child
        .stdout
        .take()
        .expect("piped stdout")
        .read_to_string(&mut text)
        .map_err(broken)?;
    let now = clock.now_ns();
    let status = child.wait().map_err(broken)?;
    let line = text.lines().next().filter(|_| status.success()).ok_or_else(|| {
        ScenarioError::ChannelBroken(format!(
            "worker for window {} exited with {status} and no verdict",
            c.batch.window_index()
        ))
    })?;
    let parsed = VerdictLine::parse(line)
        .map_err(|e| ScenarioError::ChannelBroken(format!("bad verdict line {line:?}: {e}")))?;
    Ok(record(c, parsed.into_verdict(now), now))
}

impl Transport for WorkerPerBatch {
    fn submit(&mut self, c: Collected) -> Result<(), ScenarioError> {
        let previous = self.previous.replace(c.batch.clone());
        let (launcher, det, clock, tx) = (
            self.launcher.clone(),
            self.det.clone(),
            Arc::clone(&self.clock),
            self.tx.clone(),
        );
        std::thread::Builder::new()
            .name(format!("worker-{}", c.batch.window_index()))
            .spawn(move || {
                let _ = tx.send(one_shot(&launcher, &det, previous.as_ref(), &c, &*clock));
            })
            .map_err(|e| ScenarioError::SpawnFailure(e.to_string()))?;
        self.spawned += 1;
        Ok(())
    }

    fn finish(self: Box<Self>, reap_timeout: Duration) -> Result<Outcome, ScenarioError> {
        let deadline = Instant::now() + reap_timeout;
        let mut windows = Vec::new();
        let mut first_error = None;
        let mut received = 0;
        while received < self.spawned {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.rx.recv_timeout(left) {
                Ok(Ok(w)) => windows.push(w),
                Ok(Err(e)) => {
                    first_error.get_or_insert(e);
                }
                Err(_) => break,
            }
            received += 1;
        }
        if let Some(e) = first_error {
            return Err(e);
        }
        Ok(Outcome {
            windows,
            workers_spawned: self.spawned,
            workers_unreaped: self.spawned - received,
            ..Outcome::default()
        })
    }
}
