//! Turns run records into the metrics reported per scenario, sweeps the
//! replay rate, and writes reports as JSON or CSV.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::ClockKind;
use crate::detector::DetectorConfig;
use crate::emulator::ReplayConfig;
use crate::scenarios::{
    predicted_inline_loss_buffered, predicted_loss_ratio, run_scenario, RunRecord, ScenarioError, ScenarioKind,
    ScenarioOptions,
};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("run produced no complete window")]
    EmptyRun,
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("writing report: {0}")]
    Io(#[from] std::io::Error),
    #[error("writing report: {0}")]
    Csv(#[from] csv::Error),
    #[error("writing report: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub min: f64,
    pub max: f64,
    pub avg: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let (min, max, sum) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY, 0.0), |(lo, hi, s), &v| {
                (lo.min(v), hi.max(v), s + v)
            });
        Some(Stats {
            min,
            max,
            avg: sum / values.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub w: usize,
    pub rate: f64,
    pub tau: f64,
    pub queue_capacity: Option<usize>,
    pub buffer_capacity: usize,
    pub clock: ClockKind,
    pub eval_padding_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub send_ms: Stats,
    pub eval_ms: Stats,
    pub response_ms_avg: f64,
    pub loss_ratio: f64,
    pub published: u64,
    pub dropped: u64,
    pub queue_dropped: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Host {
    pub os: String,
    pub cpu: String,
}

impl Host {
    pub fn detect() -> Host {
        let model = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|info| {
                info.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, m)| m.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".to_string());
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        Host {
            os: format!("{}-{}", std::env::consts::OS, std::env::consts::ARCH),
            cpu: format!("{model} ({cores} cores)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub scenario: ScenarioKind,
    pub config: ConfigEcho,
    pub metrics: Metrics,
    pub host: Host,
    pub windows: usize,
}

fn ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

pub fn summarize(record: &RunRecord) -> Result<MetricsSummary, BenchError> {
    let send: Vec<f64> = record.replay.batch_send_ns.iter().copied().map(ms).collect();
    let eval: Vec<f64> = record.windows.iter().map(|w| ms(w.eval_ns())).collect();
    let response: Vec<f64> = record.windows.iter().map(|w| ms(w.response_ns())).collect();
    let (send_ms, eval_ms, response_ms) = match (Stats::of(&send), Stats::of(&eval), Stats::of(&response)) {
        (Some(s), Some(e), Some(r)) => (s, e, r),
        _ => return Err(BenchError::EmptyRun),
    };
    Ok(MetricsSummary {
        scenario: record.kind,
        config: ConfigEcho {
            w: record.detector.window_size,
            rate: record.rate_msgs_per_sec,
            tau: record.detector.threshold,
            queue_capacity: record.queue_capacity,
            buffer_capacity: record.buffer_capacity,
            clock: record.clock,
            eval_padding_ms: record.detector.eval_padding.as_secs_f64() * 1e3,
        },
        metrics: Metrics {
            send_ms,
            eval_ms,
            response_ms_avg: response_ms.avg,
            loss_ratio: record.loss_ratio(),
            published: record.published(),
            dropped: record.dropped(),
            queue_dropped: record.queue_dropped,
        },
        host: Host::detect(),
        windows: record.windows.len(),
    })
}

/// One point of a loss-versus-rate sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rate: f64,
    /// Nominal time to send one window at this rate.
    pub batch_send_ms: f64,
    pub loss_ratio: Option<f64>,
    pub predicted_loss_ratio: f64,
    pub windows: usize,
    pub error: Option<String>,
}

/// Runs the scenario once per rate. A failing rate is reported in its row
/// rather than aborting the sweep.
pub fn sweep_loss_vs_rate(
    opts: &ScenarioOptions,
    rates: &[f64],
    base: &ReplayConfig,
    det: &DetectorConfig,
) -> Vec<SweepRow> {
    rates
        .iter()
        .map(|&rate| {
            let send_s = det.window_size as f64 / rate;
            let eval_s = det.eval_padding.as_secs_f64();
            let mut row = SweepRow {
                rate,
                batch_send_ms: send_s * 1e3,
                loss_ratio: None,
                predicted_loss_ratio: match opts.mode.kind {
                    ScenarioKind::S1Inline => {
                        predicted_inline_loss_buffered(rate, det.window_size, eval_s, opts.buffer_capacity)
                    }
                    kind => predicted_loss_ratio(kind, send_s, eval_s),
                },
                windows: 0,
                error: None,
            };
            let cfg = ReplayConfig {
                rate_msgs_per_sec: rate,
                ..base.clone()
            };
            match run_scenario(opts, &cfg, det) {
                Ok(rec) => {
                    row.loss_ratio = Some(rec.loss_ratio());
                    row.windows = rec.windows.len();
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Flat CSV view of a summary.
#[derive(Serialize)]
struct SummaryRow<'a> {
    scenario: String,
    w: usize,
    rate: f64,
    tau: f64,
    queue_capacity: Option<usize>,
    buffer_capacity: usize,
    send_ms_min: f64,
    send_ms_max: f64,
    send_ms_avg: f64,
    eval_ms_min: f64,
    eval_ms_max: f64,
    eval_ms_avg: f64,
    response_ms_avg: f64,
    loss_ratio: f64,
    windows: usize,
    os: &'a str,
    cpu: &'a str,
}

pub fn emit_report(summaries: &[MetricsSummary], format: ReportFormat, out: impl Write) -> Result<(), BenchError> {
    match format {
        ReportFormat::Json => {
            let mut out = out;
            if let [one] = summaries {
                serde_json::to_writer_pretty(&mut out, one)?;
            } else {
                serde_json::to_writer_pretty(&mut out, summaries)?;
            }
            writeln!(out)?;
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for s in summaries {
                let m = &s.metrics;
                w.serialize(SummaryRow {
                    scenario: s.scenario.to_string(),
                    w: s.config.w,
                    rate: s.config.rate,
                    tau: s.config.tau,
                    queue_capacity: s.config.queue_capacity,
                    buffer_capacity: s.config.buffer_capacity,
                    send_ms_min: m.send_ms.min,
                    send_ms_max: m.send_ms.max,
                    send_ms_avg: m.send_ms.avg,
                    eval_ms_min: m.eval_ms.min,
                    eval_ms_max: m.eval_ms.max,
                    eval_ms_avg: m.eval_ms.avg,
                    response_ms_avg: m.response_ms_avg,
                    loss_ratio: m.loss_ratio,
                    windows: s.windows,
                    os: &s.host.os,
                    cpu: &s.host.cpu,
                })?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn emit_sweep(rows: &[SweepRow], format: ReportFormat, out: impl Write) -> Result<(), BenchError> {
    match format {
        ReportFormat::Json => {
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, rows)?;
            writeln!(out)?;
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emulator::ReplayConfig;
    use std::time::Duration;

    fn sim(
        kind: ScenarioKind,
        rate: f64,
        pad_ms: u64,
        windows: usize,
    ) -> (ScenarioOptions, ReplayConfig, DetectorConfig) {
        let det = DetectorConfig {
            window_size: 1000,
            eval_padding: Duration::from_millis(pad_ms),
            ..Default::default()
        };
        let mut replay = ReplayConfig::synthetic(1000 * windows);
        replay.rate_msgs_per_sec = rate;
        replay.clock = ClockKind::Simulated;
        replay.allow_over_capacity = true;
        (ScenarioOptions::new(kind), replay, det)
    }

    #[test]
    fn stats_examples() {
        assert_eq!(Stats::of(&[]), None);
        assert_eq!(
            Stats::of(&[2.0, 4.0, 9.0]),
            Some(Stats {
                min: 2.0,
                max: 9.0,
                avg: 5.0
            })
        );
    }

    #[test]
    fn summary_of_simulated_inline_run() {
        let (opts, replay, det) = sim(ScenarioKind::S1Inline, 1000.0, 149, 12);
        let rec = run_scenario(&opts, &replay, &det).unwrap();
        let s = summarize(&rec).unwrap();
        assert_eq!(
            s.metrics.send_ms,
            Stats {
                min: 1000.0,
                max: 1000.0,
                avg: 1000.0
            }
        );
        assert_eq!(
            s.metrics.eval_ms,
            Stats {
                min: 149.0,
                max: 149.0,
                avg: 149.0
            }
        );
        // Each window spans 999 ms of reading plus the buffered tail.
        assert!(s.metrics.response_ms_avg > 1000.0 && s.metrics.response_ms_avg < 1300.0);
        assert_eq!(s.windows, rec.windows.len());
        assert_eq!(s.metrics.published, 12_000);
    }

    #[test]
    fn json_report_has_expected_shape() {
        let (opts, replay, det) = sim(ScenarioKind::S3TwoTasksOneProcess, 1000.0, 5, 3);
        let s = summarize(&run_scenario(&opts, &replay, &det).unwrap()).unwrap();
        let mut buf = Vec::new();
        emit_report(std::slice::from_ref(&s), ReportFormat::Json, &mut buf).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v["scenario"], "S3_TwoTasksOneProcess");
        for key in ["w", "rate", "tau", "queue_capacity", "buffer_capacity"] {
            assert!(v["config"].get(key).is_some(), "{key}");
        }
        for key in ["min", "max", "avg"] {
            assert!(v["metrics"]["send_ms"][key].is_number());
            assert!(v["metrics"]["eval_ms"][key].is_number());
        }
        assert_eq!(v["metrics"]["loss_ratio"], 0.0);
        assert!(v["host"]["os"].is_string() && v["host"]["cpu"].is_string());
        assert_eq!(v["windows"], 3);
        let back: MetricsSummary = serde_json::from_slice(&buf).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn csv_report_has_header_and_row() {
        let (opts, replay, det) = sim(ScenarioKind::S1Inline, 1000.0, 0, 2);
        let s = summarize(&run_scenario(&opts, &replay, &det).unwrap()).unwrap();
        let mut buf = Vec::new();
        emit_report(&[s.clone(), s], ReportFormat::Csv, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("scenario,w,rate,tau,"));
    }

    #[test]
    fn sweep_reports_failures_per_row() {
        let (opts, mut replay, det) = sim(ScenarioKind::S1Inline, 1000.0, 30, 3);
        replay.allow_over_capacity = false;
        let rows = sweep_loss_vs_rate(&opts, &[250.0, 5000.0], &replay, &det);
        assert_eq!(rows[0].error, None);
        assert_eq!((rows[0].windows, rows[0].loss_ratio), (3, Some(0.0)));
        assert_eq!(rows[0].predicted_loss_ratio, 0.0);
        assert!(rows[1].error.is_some());
        assert_eq!(rows[1].loss_ratio, None);
    }

    #[test]
    fn empty_run_is_an_error() {
        let (opts, replay, mut det) = sim(ScenarioKind::S1Inline, 1000.0, 0, 1);
        det.window_size = 5000;
        let rec = run_scenario(&opts, &replay, &det).unwrap();
        assert!(matches!(summarize(&rec), Err(BenchError::EmptyRun)));
    }
}
