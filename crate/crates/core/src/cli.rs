//! Command-line front end.
//!
//! Settings come from built-in defaults, then an optional TOML file
//! (`--config` or `CANIDS_CONFIG`), then flags. Exit codes: 0 success,
//! 2 anomaly detected by `run`, 64 usage error, 1 any other failure.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::bench::{emit_report, emit_sweep, summarize, sweep_loss_vs_rate, ReportFormat};
use crate::bus::DEFAULT_BUFFER_CAPACITY;
use crate::can_frame::{format_log_line, windows_of};
use crate::clock::{Clock, ClockKind, RealClock, SimClock};
use crate::detector::{calibrate_threshold, DetectorConfig, Label, WarmupPolicy, DEFAULT_MARGIN, DEFAULT_PERCENTILE};
use crate::emulator::{slot_offset_ns, AttackSpec, ReplayConfig, Source, DEFAULT_INJECTION_RATE};
use crate::scenarios::{run_scenario, ScenarioKind, ScenarioOptions, DEFAULT_QUEUE_CAPACITY};
use crate::worker::{run_worker, WorkerLauncher, WorkerOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_ANOMALY: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

pub const CONFIG_ENV: &str = "CANIDS_CONFIG";

#[derive(Debug, Parser)]
#[command(
    name = "canids",
    version,
    about = "CAN bus intrusion detection and concurrency benchmark"
)]
pub struct Cli {
    /// TOML settings file; flags override its values.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the (optionally attacked) frame stream as a candump log, paced at the replay rate.
    Replay(ReplayArgs),
    /// Derive a detection threshold from clean traffic.
    Calibrate(CalibrateArgs),
    /// Run the detection pipeline under one architecture and report metrics.
    Run(RunArgs),
    /// Measure loss ratio across replay rates.
    Sweep(SweepArgs),
    #[command(name = "_worker", hide = true)]
    Worker(WorkerArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockArg {
    Real,
    Sim,
}

impl From<ClockArg> for ClockKind {
    fn from(c: ClockArg) -> Self {
        match c {
            ClockArg::Real => ClockKind::Real,
            ClockArg::Sim => ClockKind::Simulated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarmupArg {
    Normal,
    Unknown,
}

impl From<WarmupArg> for WarmupPolicy {
    fn from(w: WarmupArg) -> Self {
        match w {
            WarmupArg::Normal => WarmupPolicy::ReportNormal,
            WarmupArg::Unknown => WarmupPolicy::ReportUnknown,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct SourceArgs {
    /// candump -L log to replay.
    #[arg(long, conflicts_with = "synthetic")]
    pub log: Option<PathBuf>,
    /// Generate this many frames from the built-in 20-ECU schedule.
    #[arg(long, value_name = "FRAMES")]
    pub synthetic: Option<usize>,
    /// Stop after this many frames.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Replay rate in messages per second.
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long, value_enum)]
    pub clock: Option<ClockArg>,
    /// Permit rates above the physical bus capacity.
    #[arg(long)]
    pub allow_over_capacity: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct AttackArgs {
    /// First attacked window (inclusive).
    #[arg(long, requires = "attack_end")]
    pub attack_start: Option<u64>,
    /// Last attacked window (exclusive).
    #[arg(long, requires = "attack_start")]
    pub attack_end: Option<u64>,
    /// Fabricated frames per 1000 legitimate ones.
    #[arg(long, requires = "attack_start")]
    pub injection_rate: Option<u32>,
    /// Randomise injection positions with this seed.
    #[arg(long, requires = "attack_start")]
    pub attack_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DetectorArgs {
    /// Frames per detection window.
    #[arg(long)]
    pub window: Option<usize>,
    /// Similarity below this is anomalous.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Extra time added to every evaluation, in milliseconds.
    #[arg(long)]
    pub pad_ms: Option<f64>,
    /// Count the transition from one window's last frame into the next.
    #[arg(long)]
    pub carry_boundary: bool,
    #[arg(long, value_enum)]
    pub warmup: Option<WarmupArg>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ArchArgs {
    /// Architecture 1-4.
    #[arg(long, short)]
    pub scenario: Option<ScenarioKind>,
    /// Monitor receive buffer in frames.
    #[arg(long)]
    pub buffer: Option<usize>,
    /// Monitor-to-detector queue depth in windows, or "unbounded".
    #[arg(long, value_parser = parse_queue)]
    pub queue: Option<QueueArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueueArg {
    Bounded(usize),
    Unbounded,
}

fn parse_queue(s: &str) -> Result<QueueArg, String> {
    if s.eq_ignore_ascii_case("unbounded") {
        return Ok(QueueArg::Unbounded);
    }
    match s.parse::<usize>() {
        Ok(0) | Err(_) => Err(format!("expected a positive integer or \"unbounded\", got {s:?}")),
        Ok(n) => Ok(QueueArg::Bounded(n)),
    }
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub attack: AttackArgs,
    /// Write here instead of stdout.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long)]
    pub window: Option<usize>,
    /// Percentile of the clean similarity series, 0-100.
    #[arg(long, default_value_t = DEFAULT_PERCENTILE)]
    pub percentile: f64,
    /// Subtracted from the percentile value.
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    pub margin: f64,
    #[arg(long)]
    pub carry_boundary: bool,
    /// Include the similarity series in the output.
    #[arg(long)]
    pub series: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub attack: AttackArgs,
    #[command(flatten)]
    pub detector: DetectorArgs,
    /// Write one JSON verdict per line here.
    #[arg(long)]
    pub verdicts: Option<PathBuf>,
    /// Write the metrics report here instead of stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub detector: DetectorArgs,
    /// Comma-separated replay rates in messages per second.
    #[arg(
        long,
        value_delimiter = ',',
        required_unless_present = "durations",
        conflicts_with = "durations"
    )]
    pub rates: Vec<f64>,
    /// Comma-separated window send durations in seconds.
    #[arg(long, value_delimiter = ',')]
    pub durations: Vec<f64>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct WorkerArgs {
    #[arg(long)]
    pub window: usize,
    #[arg(long)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value_t = WarmupArg::Unknown)]
    pub warmup: WarmupArg,
    #[arg(long, default_value_t = 0.0)]
    pub pad_ms: f64,
    #[arg(long)]
    pub carry_boundary: bool,
    #[arg(long)]
    pub prime_first: bool,
}

/// Values a settings file may provide.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub scenario: Option<u8>,
    pub window: Option<usize>,
    pub threshold: Option<f64>,
    pub pad_ms: Option<f64>,
    pub carry_boundary: Option<bool>,
    pub warmup: Option<WarmupArg>,
    pub rate: Option<f64>,
    pub clock: Option<ClockArg>,
    pub log: Option<PathBuf>,
    pub synthetic: Option<usize>,
    pub frames: Option<usize>,
    pub buffer: Option<usize>,
    pub queue: Option<String>,
    pub allow_over_capacity: Option<bool>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

fn pad(ms: f64) -> Result<Duration> {
    Duration::try_from_secs_f64(ms / 1e3).map_err(|_| anyhow::anyhow!("invalid padding {ms} ms"))
}

fn detector_config(args: &DetectorArgs, file: &FileConfig) -> Result<DetectorConfig> {
    let d = DetectorConfig::default();
    let cfg = DetectorConfig {
        window_size: args.window.or(file.window).unwrap_or(d.window_size),
        threshold: args.threshold.or(file.threshold).unwrap_or(d.threshold),
        warmup: args.warmup.or(file.warmup).map_or(d.warmup, Into::into),
        carry_boundary_edge: args.carry_boundary || file.carry_boundary.unwrap_or(d.carry_boundary_edge),
        eval_padding: match args.pad_ms.or(file.pad_ms) {
            Some(ms) => pad(ms)?,
            None => d.eval_padding,
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

fn replay_config(
    src: &SourceArgs,
    attack: Option<&AttackArgs>,
    window: usize,
    file: &FileConfig,
) -> Result<ReplayConfig> {
    let source = match (&src.log, src.synthetic) {
        (Some(path), _) => Source::LogFile(path.clone()),
        (None, Some(n)) => ReplayConfig::synthetic(n).source,
        (None, None) => match (&file.log, file.synthetic) {
            (Some(_), Some(_)) => bail!("config sets both log and synthetic"),
            (Some(path), None) => Source::LogFile(path.clone()),
            (None, Some(n)) => ReplayConfig::synthetic(n).source,
            (None, None) => bail!("no traffic source: pass --log or --synthetic"),
        },
    };
    let mut cfg = ReplayConfig::synthetic(0);
    cfg.source = source;
    cfg.frame_budget = src.frames.or(file.frames);
    if let Some(rate) = src.rate.or(file.rate) {
        cfg.rate_msgs_per_sec = rate;
    }
    cfg.clock = src.clock.or(file.clock).map_or(ClockKind::Real, Into::into);
    cfg.allow_over_capacity = src.allow_over_capacity || file.allow_over_capacity.unwrap_or(false);
    cfg.attack_window_len = window;
    if let Some(a) = attack {
        if let (Some(start), Some(end)) = (a.attack_start, a.attack_end) {
            let mut spec = AttackSpec::speed_reading(start, end, a.injection_rate.unwrap_or(DEFAULT_INJECTION_RATE));
            spec.jitter_seed = a.attack_seed;
            cfg.attack = Some(spec);
        }
    }
    cfg.validate_rate()?;
    Ok(cfg)
}

fn scenario_options(arch: &ArchArgs, file: &FileConfig) -> Result<ScenarioOptions> {
    let kind = match (arch.scenario, file.scenario) {
        (Some(k), _) => k,
        (None, Some(n)) => ScenarioKind::from_number(n).with_context(|| format!("config scenario {n} is not 1-4"))?,
        (None, None) => ScenarioKind::S3TwoTasksOneProcess,
    };
    let mut opts = ScenarioOptions::new(kind);
    opts.buffer_capacity = arch.buffer.or(file.buffer).unwrap_or(DEFAULT_BUFFER_CAPACITY);
    let queue = match (arch.queue, &file.queue) {
        (Some(q), _) => Some(q),
        (None, Some(s)) => Some(parse_queue(s).map_err(anyhow::Error::msg)?),
        (None, None) => None,
    };
    if kind.uses_queue() {
        opts.mode.queue_capacity = match queue {
            Some(QueueArg::Bounded(n)) => Some(n),
            Some(QueueArg::Unbounded) => None,
            None => Some(DEFAULT_QUEUE_CAPACITY),
        };
    } else if arch.queue.is_some() {
        bail!("--queue only applies to scenarios 3 and 4");
    }
    if kind.needs_worker_process() {
        opts.launcher = Some(WorkerLauncher::current_exe().context("locating own executable")?);
    }
    Ok(opts)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_replay(args: &ReplayArgs, file: &FileConfig) -> Result<i32> {
    let window = file.window.unwrap_or(crate::detector::DEFAULT_WINDOW);
    let cfg = replay_config(&args.source, Some(&args.attack), window, file)?;
    let frames = cfg.load_frames()?.frames;
    let clock: Box<dyn Clock> = match cfg.clock {
        ClockKind::Real => Box::new(RealClock::new()),
        ClockKind::Simulated => Box::new(SimClock::new()),
    };
    let mut out = output(args.out.as_deref())?;
    for (k, f) in frames.iter().enumerate() {
        let t = slot_offset_ns(k as u64, cfg.rate_msgs_per_sec);
        clock.sleep_until(t);
        writeln!(out, "{}", format_log_line(&f.with_timestamp(t)))?;
        if cfg.clock == ClockKind::Real {
            out.flush()?;
        }
    }
    out.flush()?;
    Ok(EXIT_OK)
}

fn cmd_calibrate(args: &CalibrateArgs, file: &FileConfig) -> Result<i32> {
    let window = args.window.or(file.window).unwrap_or(crate::detector::DEFAULT_WINDOW);
    let cfg = replay_config(&args.source, None, window, file)?;
    let frames = cfg.load_frames()?.frames;
    let windows = windows_of(&frames, window)?;
    let carry = args.carry_boundary || file.carry_boundary.unwrap_or(false);
    let cal = calibrate_threshold(&windows, carry, args.percentile, args.margin)?;
    let mut value = serde_json::json!({
        "tau": cal.tau,
        "percentile": cal.percentile,
        "margin": cal.margin,
        "window": cal.window,
        "windows": windows.len(),
        "series_len": cal.series.len(),
    });
    if args.series {
        value["series"] = serde_json::json!(cal.series);
    }
    println!("{value}");
    Ok(EXIT_OK)
}

fn cmd_run(args: &RunArgs, file: &FileConfig) -> Result<i32> {
    let det = detector_config(&args.detector, file)?;
    let replay = replay_config(&args.source, Some(&args.attack), det.window_size, file)?;
    let opts = scenario_options(&args.arch, file)?;
    let record = run_scenario(&opts, &replay, &det)?;
    if let Some(path) = &args.verdicts {
        let mut out = output(Some(path))?;
        for v in record.verdicts() {
            writeln!(out, "{}", v.to_line().to_json())?;
        }
        out.flush()?;
    }
    let summary = summarize(&record)?;
    let mut out = output(args.report.as_deref())?;
    emit_report(std::slice::from_ref(&summary), args.format.into(), &mut out)?;
    out.flush()?;
    let anomalous = record.verdicts().any(|v| v.label == Label::Anomalous);
    Ok(if anomalous { EXIT_ANOMALY } else { EXIT_OK })
}

fn cmd_sweep(args: &SweepArgs, file: &FileConfig) -> Result<i32> {
    let det = detector_config(&args.detector, file)?;
    let opts = scenario_options(&args.arch, file)?;
    let rates: Vec<f64> = if args.rates.is_empty() {
        args.durations.iter().map(|d| det.window_size as f64 / d).collect()
    } else {
        args.rates.clone()
    };
    if let Some(bad) = rates.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
        bail!("invalid rate {bad}");
    }
    let mut base = replay_config(&args.source, None, det.window_size, file)?;
    base.rate_msgs_per_sec = rates[0];
    let rows = sweep_loss_vs_rate(&opts, &rates, &base, &det);
    let mut out = output(args.report.as_deref())?;
    emit_sweep(&rows, args.format.into(), &mut out)?;
    out.flush()?;
    Ok(if rows.iter().any(|r| r.error.is_some()) {
        EXIT_FAILURE
    } else {
        EXIT_OK
    })
}

fn cmd_worker(args: &WorkerArgs) -> Result<i32> {
    let opts = WorkerOptions {
        detector: DetectorConfig {
            window_size: args.window,
            threshold: args.threshold,
            warmup: args.warmup.into(),
            carry_boundary_edge: args.carry_boundary,
            eval_padding: pad(args.pad_ms)?,
        },
        prime_first: args.prime_first,
    };
    run_worker(&opts, io::stdin().lock(), io::stdout().lock())?;
    Ok(EXIT_OK)
}

pub fn execute(cli: &Cli) -> Result<i32> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match &cli.command {
        Command::Replay(a) => cmd_replay(a, &file),
        Command::Calibrate(a) => cmd_calibrate(a, &file),
        Command::Run(a) => cmd_run(a, &file),
        Command::Sweep(a) => cmd_sweep(a, &file),
        Command::Worker(a) => cmd_worker(a),
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

pub fn main() -> i32 {
    main_with(std::env::args_os())
}
