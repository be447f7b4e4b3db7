//! Child-process side of the out-of-process architectures: reads `CANB`
//! batches from a byte stream and answers each with one JSON verdict line.

use std::io::{BufWriter, Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};

use thiserror::Error;

use crate::can_frame::{read_batch, FrameError};
use crate::clock::RealClock;
use crate::detector::{Detector, DetectorConfig, DetectorError, WarmupPolicy};

/// Hidden subcommand name the launcher appends.
pub const WORKER_SUBCOMMAND: &str = "_worker";

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("writing verdict: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct WorkerOptions {
    pub detector: DetectorConfig,
    /// The first batch on the stream only seeds the previous-window state.
    pub prime_first: bool,
}

/// Serves batches until end of input; returns the number of verdicts written.
pub fn run_worker(opts: &WorkerOptions, mut input: impl Read, output: impl Write) -> Result<u64, WorkerError> {
    let clock = RealClock::new();
    let mut detector = Detector::new(opts.detector.clone())?;
    let mut out = BufWriter::new(output);
    let mut first = true;
    let mut written = 0;
    while let Some(batch) = read_batch(&mut input)? {
        if first && opts.prime_first {
            detector.prime(&batch)?;
        } else {
            let verdict = detector.evaluate(&batch, &clock)?;
            writeln!(out, "{}", verdict.to_line().to_json())?;
            out.flush()?;
            written += 1;
        }
        first = false;
    }
    Ok(written)
}

/// How to start a worker process: an executable that understands the
/// hidden worker subcommand, plus any leading arguments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerLauncher {
    pub program: PathBuf,
    pub leading_args: Vec<String>,
}

impl WorkerLauncher {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        WorkerLauncher {
            program: program.into(),
            leading_args: Vec::new(),
        }
    }

    /// The running executable.
    pub fn current_exe() -> std::io::Result<Self> {
        std::env::current_exe().map(Self::new)
    }

    pub fn command(&self, det: &DetectorConfig, prime_first: bool) -> Command {
        let mut cmd = Command::new(&self.program);
        cmd.args(&self.leading_args)
            .arg(WORKER_SUBCOMMAND)
            .args(worker_args(det, prime_first))
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        cmd
    }
}

/// Flags understood by the worker subcommand.
pub fn worker_args(det: &DetectorConfig, prime_first: bool) -> Vec<String> {
    let mut args = vec![
        "--window".to_string(),
        det.window_size.to_string(),
        "--threshold".to_string(),
        // Debug formatting of f64 round-trips exactly.
        format!("{:?}", det.threshold),
        "--warmup".to_string(),
        match det.warmup {
            WarmupPolicy::ReportNormal => "normal",
            WarmupPolicy::ReportUnknown => "unknown",
        }
        .to_string(),
        "--pad-ms".to_string(),
        format!("{:?}", det.eval_padding.as_secs_f64() * 1e3),
    ];
    if det.carry_boundary_edge {
        args.push("--carry-boundary".to_string());
    }
    if prime_first {
        args.push("--prime-first".to_string());
    }
    args
}
