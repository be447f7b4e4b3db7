//! Similarity-threshold anomaly detection over successive batch windows.
//!
//! Each window's graph is compared with the previous window's graph; a
//! similarity below the threshold marks the new window as anomalous.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::can_frame::FrameBatch;
use crate::clock::Clock;
use crate::msg_graph::{
    build_msg_with_boundary, cosine_similarity, GraphError, MessagesSequenceGraph, SimilarityScore,
};

pub const DEFAULT_WINDOW: usize = 1000;
/// Threshold used when none is configured or calibrated.
pub const DEFAULT_THRESHOLD: f64 = 0.95;
pub const DEFAULT_PERCENTILE: f64 = 1.0;
pub const DEFAULT_MARGIN: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error("window {window} has {got} frames, expected {expected}")]
    BatchSize { window: u64, expected: usize, got: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("calibration needs at least 3 windows, got {0}")]
    InsufficientData(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WarmupPolicy {
    ReportNormal,
    #[default]
    ReportUnknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub window_size: usize,
    pub threshold: f64,
    pub warmup: WarmupPolicy,
    /// Count the transition from the previous window's last frame into the
    /// current window's first frame.
    pub carry_boundary_edge: bool,
    /// Artificial delay added to every evaluation.
    #[serde(with = "duration_ms")]
    pub eval_padding: Duration,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            window_size: DEFAULT_WINDOW,
            threshold: DEFAULT_THRESHOLD,
            warmup: WarmupPolicy::default(),
            carry_boundary_edge: false,
            eval_padding: Duration::ZERO,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.window_size < 2 {
            return Err(DetectorError::InvalidConfig(format!(
                "window size {} < 2",
                self.window_size
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(DetectorError::InvalidConfig(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

pub(crate) mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64() * 1e3)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let ms = f64::deserialize(d)?;
        if !(ms >= 0.0 && ms.is_finite()) {
            return Err(serde::de::Error::custom("duration must be a non-negative number of ms"));
        }
        Ok(Duration::from_secs_f64(ms / 1e3))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Anomalous,
    Warmup,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub window: u64,
    pub similarity: Option<SimilarityScore>,
    pub label: Label,
    pub eval_started_ns: u64,
    pub eval_finished_ns: u64,
}

impl Verdict {
    pub fn eval_ns(&self) -> u64 {
        self.eval_finished_ns.saturating_sub(self.eval_started_ns)
    }

    /// Outcome without timing, for comparing runs.
    pub fn decision(&self) -> (u64, Option<f64>, Label) {
        (self.window, self.similarity.map(SimilarityScore::value), self.label)
    }

    pub fn to_line(&self) -> VerdictLine {
        VerdictLine {
            t: self.window,
            sim: self.similarity.map(SimilarityScore::value),
            label: self.label,
            eval_ms: self.eval_ns() as f64 / 1e6,
        }
    }
}

/// One JSON-lines record of the verdict stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictLine {
    pub t: u64,
    pub sim: Option<f64>,
    pub label: Label,
    pub eval_ms: f64,
}

impl VerdictLine {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("verdict line serializes")
    }

    pub fn parse(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }

    /// Rebuilds a verdict whose evaluation finished at `finished_ns` on the
    /// caller's clock.
    pub fn into_verdict(self, finished_ns: u64) -> Verdict {
        let eval_ns = (self.eval_ms * 1e6).round() as u64;
        Verdict {
            window: self.t,
            similarity: self.sim.and_then(SimilarityScore::new),
            label: self.label,
            eval_started_ns: finished_ns.saturating_sub(eval_ns),
            eval_finished_ns: finished_ns,
        }
    }
}

/// What the detector remembers between windows.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState {
    pub graph: MessagesSequenceGraph,
    pub last_key: u32,
}

pub fn classify(similarity: SimilarityScore, threshold: f64) -> Label {
    if similarity.value() < threshold {
        Label::Anomalous
    } else {
        Label::Normal
    }
}

/// Evaluates one window against the previous window's state.
pub fn evaluate_window(
    state: Option<&DetectorState>,
    batch: &FrameBatch,
    cfg: &DetectorConfig,
    clock: &dyn Clock,
) -> Result<(Verdict, DetectorState), DetectorError> {
    let started = clock.now_ns();
    if batch.len() != cfg.window_size {
        return Err(DetectorError::BatchSize {
            window: batch.window_index(),
            expected: cfg.window_size,
            got: batch.len(),
        });
    }
    let carried = if cfg.carry_boundary_edge {
        state.map(|s| s.last_key)
    } else {
        None
    };
    let graph = build_msg_with_boundary(batch, carried)?;
    let (similarity, label) = match state {
        None => {
            let label = match cfg.warmup {
                WarmupPolicy::ReportNormal => Label::Normal,
                WarmupPolicy::ReportUnknown => Label::Warmup,
            };
            (None, label)
        }
        Some(prev) => {
            let s = cosine_similarity(&prev.graph, &graph)?;
            (Some(s), classify(s, cfg.threshold))
        }
    };
    if !cfg.eval_padding.is_zero() {
        clock.sleep_for(cfg.eval_padding);
    }
    let verdict = Verdict {
        window: batch.window_index(),
        similarity,
        label,
        eval_started_ns: started,
        eval_finished_ns: clock.now_ns(),
    };
    let last_key = batch.frames().last().expect("window has frames").key();
    Ok((verdict, DetectorState { graph, last_key }))
}

/// Stateful single-consumer detector.
#[derive(Debug)]
pub struct Detector {
    cfg: DetectorConfig,
    state: Option<DetectorState>,
}

impl Detector {
    pub fn new(cfg: DetectorConfig) -> Result<Self, DetectorError> {
        cfg.validate()?;
        Ok(Detector { cfg, state: None })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn evaluate(&mut self, batch: &FrameBatch, clock: &dyn Clock) -> Result<Verdict, DetectorError> {
        let (verdict, state) = evaluate_window(self.state.as_ref(), batch, &self.cfg, clock)?;
        self.state = Some(state);
        Ok(verdict)
    }

    /// Installs `batch` as the previous window without producing a verdict.
    pub fn prime(&mut self, batch: &FrameBatch) -> Result<(), DetectorError> {
        let carried = if self.cfg.carry_boundary_edge {
            self.state.as_ref().map(|s| s.last_key)
        } else {
            None
        };
        let graph = build_msg_with_boundary(batch, carried)?;
        let last_key = batch.frames().last().expect("graph built").key();
        self.state = Some(DetectorState { graph, last_key });
        Ok(())
    }

    pub fn reset(&mut self) {
        self.state = None;
    }
}

/// Nearest-rank percentile: the smallest sample with at least `p` percent of
/// the samples at or below it. `p` in `[0, 100]`.
pub fn percentile_nearest_rank(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

/// Similarities between each pair of consecutive windows.
pub fn similarity_series(windows: &[FrameBatch], carry_boundary_edge: bool) -> Result<Vec<f64>, DetectorError> {
    let mut prev: Option<DetectorState> = None;
    let mut series = Vec::with_capacity(windows.len().saturating_sub(1));
    for batch in windows {
        let carried = if carry_boundary_edge {
            prev.as_ref().map(|s| s.last_key)
        } else {
            None
        };
        let graph = build_msg_with_boundary(batch, carried)?;
        if let Some(p) = &prev {
            series.push(cosine_similarity(&p.graph, &graph)?.value());
        }
        let last_key = batch.frames().last().expect("graph built").key();
        prev = Some(DetectorState { graph, last_key });
    }
    Ok(series)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tau: f64,
    pub percentile: f64,
    pub margin: f64,
    pub window: usize,
    pub series: Vec<f64>,
}

/// Threshold = `percentile`-th percentile of the attack-free similarity series
/// minus `margin`, clamped to `[0, 1]`.
pub fn calibrate_threshold(
    normal_windows: &[FrameBatch],
    carry_boundary_edge: bool,
    percentile: f64,
    margin: f64,
) -> Result<Calibration, DetectorError> {
    if normal_windows.len() < 3 {
        return Err(DetectorError::InsufficientData(normal_windows.len()));
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(DetectorError::InvalidConfig(format!(
            "percentile {percentile} outside [0, 100]"
        )));
    }
    let series = similarity_series(normal_windows, carry_boundary_edge)?;
    let tau = threshold_from_series(&series, percentile, margin)?;
    Ok(Calibration {
        tau,
        percentile,
        margin,
        window: normal_windows[0].len(),
        series,
    })
}

pub fn threshold_from_series(series: &[f64], percentile: f64, margin: f64) -> Result<f64, DetectorError> {
    if series.len() < 2 {
        return Err(DetectorError::InsufficientData(series.len() + 1));
    }
    let p = percentile_nearest_rank(series, percentile)
        .ok_or_else(|| DetectorError::InvalidConfig(format!("percentile {percentile} outside [0, 100]")))?;
    Ok((p - margin).clamp(0.0, 1.0))
}
