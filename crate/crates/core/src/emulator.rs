//! ECU emulator: produces frame streams (from candump logs or a synthetic
//! periodic schedule), splices in fabricated attack frames, and replays a
//! stream onto the bus at a fixed rate.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::path::PathBuf;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{BusError, VirtualBus};
use crate::can_frame::{read_log_file, CanFrame, FrameError};
use crate::clock::{Clock, ClockKind};

/// Highest sustained frame rate accepted without an explicit override.
pub const BUS_CAPACITY_MSGS_PER_SEC: f64 = 1908.0;
pub const DEFAULT_RATE: f64 = 1000.0;
/// Injected frames per 1000 legitimate frames used by the CLI by default.
pub const DEFAULT_INJECTION_RATE: u32 = 250;
/// Speed-reading identifier and the forged `FFF` reading.
pub const DEFAULT_ATTACK_ID: u32 = 0x244;
pub const DEFAULT_ATTACK_PAYLOAD: [u8; 2] = [0x0F, 0xFF];

const MS: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum EmulatorError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("rate {0} msgs/s exceeds bus capacity of {BUS_CAPACITY_MSGS_PER_SEC} msgs/s")]
    RateExceedsBusCapacity(f64),
    #[error("invalid rate {0}")]
    InvalidRate(f64),
    #[error("attack windows {start}..{end} outside schedule of {windows} windows")]
    WindowOutOfRange { start: u64, end: u64, windows: u64 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid attack: {0}")]
    InvalidAttack(String),
    #[error(transparent)]
    Bus(#[from] BusError),
}

/// One periodic sender.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ecu {
    pub can_id: u32,
    pub period_ns: u64,
}

/// Twenty standard identifiers with periods from 5 ms to 100 ms in 5 ms
/// steps; lower identifiers send more often.
pub fn default_dictionary() -> Vec<Ecu> {
    const IDS: [u32; 20] = [
        0x0C1, 0x0C5, 0x0F1, 0x130, 0x17C, 0x1A6, 0x1D0, 0x200, 0x215, 0x244, 0x260, 0x2A0, 0x2E4, 0x305, 0x33C, 0x342,
        0x344, 0x3A0, 0x405, 0x4B0,
    ];
    IDS.iter()
        .enumerate()
        .map(|(i, &can_id)| Ecu {
            can_id,
            period_ns: 5 * MS * (i as u64 + 1),
        })
        .collect()
}

/// Merges the periodic emissions of every ECU in time order; simultaneous
/// emissions go out in ascending identifier order. Frame timestamps are the
/// emission times. Payload byte 0 is a per-ECU rolling counter.
pub fn synth_schedule(ecus: &[Ecu], total: usize) -> Result<Vec<CanFrame>, EmulatorError> {
    if ecus.len() < 2 {
        return Err(EmulatorError::InvalidSchedule(format!(
            "need at least 2 ECUs, got {}",
            ecus.len()
        )));
    }
    if let Some(e) = ecus.iter().find(|e| e.period_ns == 0) {
        return Err(EmulatorError::InvalidSchedule(format!(
            "ECU {:#X} has zero period",
            e.can_id
        )));
    }
    // Validate ids up front so the merge below cannot fail.
    for e in ecus {
        CanFrame::new(0, e.can_id, false, &[])?;
    }

    let mut heap: BinaryHeap<Reverse<(u64, u32, usize)>> = ecus
        .iter()
        .enumerate()
        .map(|(i, e)| Reverse((0, e.can_id, i)))
        .collect();
    let mut counters = vec![0u8; ecus.len()];
    let mut out = Vec::with_capacity(total);
    while out.len() < total {
        let Reverse((t, id, i)) = heap.pop().expect("heap holds one entry per ECU");
        let n = counters[i];
        counters[i] = n.wrapping_add(1);
        let payload = [n, (id >> 8) as u8, id as u8, 0, 0, 0, 0, n ^ 0x5A];
        out.push(CanFrame::standard(t, id, &payload));
        heap.push(Reverse((t + ecus[i].period_ns, id, i)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub can_id: u32,
    #[serde(default)]
    pub extended: bool,
    pub payload: Vec<u8>,
    pub start_window: u64,
    pub end_window: u64,
    /// Fabricated frames per 1000 legitimate frames.
    pub injection_rate: u32,
    /// Seed for randomised insertion points; evenly spaced when absent.
    #[serde(default)]
    pub jitter_seed: Option<u64>,
}

impl AttackSpec {
    /// Forged speed reading injected into windows `start..end`.
    pub fn speed_reading(start_window: u64, end_window: u64, injection_rate: u32) -> Self {
        AttackSpec {
            can_id: DEFAULT_ATTACK_ID,
            extended: false,
            payload: DEFAULT_ATTACK_PAYLOAD.to_vec(),
            start_window,
            end_window,
            injection_rate,
            jitter_seed: None,
        }
    }

    fn frame(&self, timestamp_ns: u64) -> Result<CanFrame, EmulatorError> {
        CanFrame::new(timestamp_ns, self.can_id, self.extended, &self.payload)
            .map_err(|e| EmulatorError::InvalidAttack(e.to_string()))
    }
}

/// A spliced stream with a parallel flag per frame marking fabricated ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Spliced {
    pub frames: Vec<CanFrame>,
    pub injected: Vec<bool>,
}

impl Spliced {
    pub fn injected_count(&self) -> usize {
        self.injected.iter().filter(|&&x| x).count()
    }
}

pub fn splice_attack(
    frames: &[CanFrame],
    spec: &AttackSpec,
    window_len: usize,
) -> Result<Vec<CanFrame>, EmulatorError> {
    splice_attack_marked(frames, spec, window_len).map(|s| s.frames)
}

/// Inserts fabricated frames into legitimate windows `start_window..end_window`
/// (windows of `window_len` legitimate frames). Each fabricated frame copies
/// the timestamp of the legitimate frame it follows.
pub fn splice_attack_marked(
    frames: &[CanFrame],
    spec: &AttackSpec,
    window_len: usize,
) -> Result<Spliced, EmulatorError> {
    assert!(window_len > 0, "window length must be positive");
    let windows = frames.len().div_ceil(window_len) as u64;
    if spec.start_window > spec.end_window || spec.end_window > windows {
        return Err(EmulatorError::WindowOutOfRange {
            start: spec.start_window,
            end: spec.end_window,
            windows,
        });
    }
    // Validates id and payload even when nothing ends up injected.
    spec.frame(0)?;

    let mut rng = spec.jitter_seed.map(ChaCha8Rng::seed_from_u64);
    let mut out = Spliced {
        frames: Vec::with_capacity(frames.len() + frames.len() * spec.injection_rate as usize / 1000),
        injected: Vec::new(),
    };
    for (w, chunk) in frames.chunks(window_len).enumerate() {
        let w = w as u64;
        let k = if (spec.start_window..spec.end_window).contains(&w) {
            ((chunk.len() as u64 * spec.injection_rate as u64 + 500) / 1000) as usize
        } else {
            0
        };
        // after[i]: number of attack frames following legit frame i.
        let mut after = vec![0usize; chunk.len()];
        if k > 0 {
            match rng.as_mut() {
                None => {
                    for j in 0..k {
                        let slot = ((j + 1) * chunk.len()).div_ceil(k) - 1;
                        after[slot] += 1;
                    }
                }
                Some(rng) if k <= chunk.len() => {
                    for slot in sample(rng, chunk.len(), k) {
                        after[slot] += 1;
                    }
                }
                Some(rng) => {
                    use rand::Rng;
                    for _ in 0..k {
                        after[rng.gen_range(0..chunk.len())] += 1;
                    }
                }
            }
        }
        for (f, &n) in chunk.iter().zip(&after) {
            out.frames.push(*f);
            out.injected.push(false);
            for _ in 0..n {
                out.frames.push(spec.frame(f.timestamp_ns())?);
                out.injected.push(true);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    LogFile(PathBuf),
    Synthetic { ecus: Vec<Ecu>, total: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub source: Source,
    pub rate_msgs_per_sec: f64,
    /// Truncates the source to this many frames.
    pub frame_budget: Option<usize>,
    pub clock: ClockKind,
    pub attack: Option<AttackSpec>,
    /// Legitimate frames per attack window.
    pub attack_window_len: usize,
    pub allow_over_capacity: bool,
}

impl ReplayConfig {
    pub fn synthetic(total: usize) -> Self {
        ReplayConfig {
            source: Source::Synthetic {
                ecus: default_dictionary(),
                total,
            },
            rate_msgs_per_sec: DEFAULT_RATE,
            frame_budget: None,
            clock: ClockKind::Real,
            attack: None,
            attack_window_len: crate::detector::DEFAULT_WINDOW,
            allow_over_capacity: false,
        }
    }

    pub fn validate_rate(&self) -> Result<(), EmulatorError> {
        let r = self.rate_msgs_per_sec;
        if !(r.is_finite() && r > 0.0) {
            return Err(EmulatorError::InvalidRate(r));
        }
        if r > BUS_CAPACITY_MSGS_PER_SEC && !self.allow_over_capacity {
            return Err(EmulatorError::RateExceedsBusCapacity(r));
        }
        Ok(())
    }

    /// Materialises the frame stream: source, then attack splice, then budget.
    pub fn load_frames(&self) -> Result<Spliced, EmulatorError> {
        let legit = match &self.source {
            Source::LogFile(path) => read_log_file(path)?,
            Source::Synthetic { ecus, total } => synth_schedule(ecus, *total)?,
        };
        let mut spliced = match &self.attack {
            Some(spec) => splice_attack_marked(&legit, spec, self.attack_window_len)?,
            None => Spliced {
                injected: vec![false; legit.len()],
                frames: legit,
            },
        };
        if let Some(budget) = self.frame_budget {
            spliced.frames.truncate(budget);
            spliced.injected.truncate(budget);
        }
        Ok(spliced)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub sent_count: u64,
    pub elapsed_ns: u64,
    /// Time to send each consecutive group of `batch_len` frames.
    pub batch_send_ns: Vec<u64>,
}

pub(crate) fn slot_offset_ns(k: u64, rate: f64) -> u64 {
    (k as f64 * 1e9 / rate).round() as u64
}

/// Publishes `frames` in order, frame `k` at `k / rate` seconds after start.
/// The run lasts `len / rate` seconds: the last frame's slot is waited out.
pub fn replay_frames(
    frames: &[CanFrame],
    rate_msgs_per_sec: f64,
    bus: &VirtualBus,
    clock: &dyn Clock,
    batch_len: usize,
) -> Result<ReplayReport, EmulatorError> {
    if !(rate_msgs_per_sec.is_finite() && rate_msgs_per_sec > 0.0) {
        return Err(EmulatorError::InvalidRate(rate_msgs_per_sec));
    }
    let batch_len = batch_len.max(1);
    let start = clock.now_ns();
    let mut batch_starts = Vec::with_capacity(frames.len() / batch_len + 1);
    for (k, frame) in frames.iter().enumerate() {
        clock.sleep_until(start + slot_offset_ns(k as u64, rate_msgs_per_sec));
        if k % batch_len == 0 {
            batch_starts.push(clock.now_ns());
        }
        bus.publish(*frame)?;
        // After a late wake-up the loop catches up without sleeping; give
        // readers a chance to run between frames as they would on a wire.
        std::thread::yield_now();
    }
    if !frames.is_empty() {
        clock.sleep_until(start + slot_offset_ns(frames.len() as u64, rate_msgs_per_sec));
    }
    let end = clock.now_ns();
    let mut batch_send_ns: Vec<u64> = batch_starts.windows(2).map(|w| w[1] - w[0]).collect();
    // Only a complete trailing group counts as a batch.
    if frames.len().is_multiple_of(batch_len) {
        if let Some(&last) = batch_starts.last() {
            batch_send_ns.push(end - last);
        }
    }
    Ok(ReplayReport {
        sent_count: frames.len() as u64,
        elapsed_ns: end - start,
        batch_send_ns,
    })
}

/// Loads the configured source and replays it.
pub fn replay(
    cfg: &ReplayConfig,
    bus: &VirtualBus,
    clock: &dyn Clock,
    batch_len: usize,
) -> Result<ReplayReport, EmulatorError> {
    cfg.validate_rate()?;
    let frames = cfg.load_frames()?.frames;
    replay_frames(&frames, cfg.rate_msgs_per_sec, bus, clock, batch_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{RealClock, SimClock};

    fn ids(frames: &[CanFrame]) -> Vec<u32> {
        frames.iter().map(CanFrame::can_id).collect()
    }

    fn legit(n: usize) -> Vec<CanFrame> {
        (0..n as u64)
            .map(|i| CanFrame::standard(i * MS, 0x100 + (i % 7) as u32, &[i as u8]))
            .collect()
    }

    #[test]
    fn equal_periods_alternate() {
        let ecus = [
            Ecu {
                can_id: 0x200,
                period_ns: 10,
            },
            Ecu {
                can_id: 0x100,
                period_ns: 10,
            },
        ];
        let f = synth_schedule(&ecus, 6).unwrap();
        assert_eq!(ids(&f), [0x100, 0x200, 0x100, 0x200, 0x100, 0x200]);
    }

    #[test]
    fn merge_by_time_then_id() {
        let (a, b) = (0x10, 0x20);
        let ecus = [
            Ecu {
                can_id: a,
                period_ns: 1,
            },
            Ecu {
                can_id: b,
                period_ns: 2,
            },
        ];
        let f = synth_schedule(&ecus, 6).unwrap();
        assert_eq!(ids(&f), [a, b, a, a, b, a]);
        assert_eq!(
            f.iter().map(CanFrame::timestamp_ns).collect::<Vec<_>>(),
            [0, 0, 1, 2, 2, 3]
        );
    }

    #[test]
    fn schedule_is_deterministic() {
        let a = synth_schedule(&default_dictionary(), 5000).unwrap();
        let b = synth_schedule(&default_dictionary(), 5000).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].timestamp_ns() <= w[1].timestamp_ns()));
    }

    #[test]
    fn schedule_rejects_bad_input() {
        assert!(synth_schedule(
            &[Ecu {
                can_id: 1,
                period_ns: 1
            }],
            10
        )
        .is_err());
        assert!(synth_schedule(
            &[
                Ecu {
                    can_id: 1,
                    period_ns: 1
                },
                Ecu {
                    can_id: 2,
                    period_ns: 0
                }
            ],
            10
        )
        .is_err());
    }

    #[test]
    fn zero_rate_or_empty_range_is_identity() {
        let input = legit(3000);
        assert_eq!(
            splice_attack(&input, &AttackSpec::speed_reading(1, 2, 0), 1000).unwrap(),
            input
        );
        assert_eq!(
            splice_attack(&input, &AttackSpec::speed_reading(1, 1, 250), 1000).unwrap(),
            input
        );
    }

    #[test]
    fn every_fifth_frame_is_attack() {
        let input = legit(1000);
        let out = splice_attack_marked(&input, &AttackSpec::speed_reading(0, 1, 250), 1000).unwrap();
        assert_eq!(out.frames.len(), 1250);
        // Independent scan: positions 4, 9, 14, ... and nowhere else.
        for (pos, (f, &inj)) in out.frames.iter().zip(&out.injected).enumerate() {
            let expect_attack = pos % 5 == 4;
            assert_eq!(inj, expect_attack, "position {pos}");
            if expect_attack {
                assert_eq!(
                    (f.can_id(), f.payload()),
                    (DEFAULT_ATTACK_ID, &DEFAULT_ATTACK_PAYLOAD[..])
                );
            }
        }
        let kept: Vec<_> = out
            .frames
            .iter()
            .zip(&out.injected)
            .filter(|(_, &i)| !i)
            .map(|(f, _)| *f)
            .collect();
        assert_eq!(kept, input);
    }

    #[test]
    fn only_selected_windows_are_attacked() {
        let input = legit(5000);
        let out = splice_attack_marked(&input, &AttackSpec::speed_reading(2, 4, 100), 1000).unwrap();
        assert_eq!(out.frames.len(), 5200);
        let first_injected = out.injected.iter().position(|&x| x).unwrap();
        assert!(first_injected >= 2000);
        assert!(out
            .frames
            .windows(2)
            .all(|w| w[0].timestamp_ns() <= w[1].timestamp_ns()));
    }

    #[test]
    fn jitter_is_seeded_and_order_preserving() {
        let input = legit(2000);
        let mut spec = AttackSpec::speed_reading(0, 2, 250);
        spec.jitter_seed = Some(7);
        let a = splice_attack_marked(&input, &spec, 1000).unwrap();
        let b = splice_attack_marked(&input, &spec, 1000).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.injected_count(), 500);
        let even = splice_attack_marked(&input, &AttackSpec::speed_reading(0, 2, 250), 1000).unwrap();
        assert_ne!(a.injected, even.injected);
        let kept: Vec<_> = a
            .frames
            .iter()
            .zip(&a.injected)
            .filter(|(_, &i)| !i)
            .map(|(f, _)| *f)
            .collect();
        assert_eq!(kept, input);
    }

    #[test]
    fn out_of_range_windows() {
        let input = legit(1500);
        assert!(matches!(
            splice_attack(&input, &AttackSpec::speed_reading(1, 3, 250), 1000),
            Err(EmulatorError::WindowOutOfRange { windows: 2, .. })
        ));
        assert!(splice_attack(&input, &AttackSpec::speed_reading(1, 2, 250), 1000).is_ok());
    }

    #[test]
    fn simulated_replay_is_exact() {
        let bus = VirtualBus::new();
        let sub = bus.subscribe(2000);
        let clock = SimClock::new();
        let r = replay_frames(&legit(1000), 1000.0, &bus, &clock, 1000).unwrap();
        assert_eq!(r.sent_count, 1000);
        assert_eq!(r.elapsed_ns, 1_000_000_000);
        assert_eq!(r.batch_send_ns, vec![1_000_000_000]);
        assert_eq!(bus.stats().published, 1000);
        assert_eq!(sub.stats().received, 1000);
    }

    #[test]
    fn empty_replay() {
        let bus = VirtualBus::new();
        let r = replay_frames(&[], 1000.0, &bus, &SimClock::new(), 1000).unwrap();
        assert_eq!((r.sent_count, r.elapsed_ns), (0, 0));
        assert!(r.batch_send_ns.is_empty());
    }

    #[test]
    fn real_time_replay_pacing() {
        let bus = VirtualBus::new();
        let clock = RealClock::new();
        let r = replay_frames(&legit(1000), 1000.0, &bus, &clock, 1000).unwrap();
        let secs = r.elapsed_ns as f64 / 1e9;
        assert!((0.95..=1.05).contains(&secs), "elapsed {secs}");
    }

    #[test]
    fn rate_guard() {
        let mut cfg = ReplayConfig::synthetic(10);
        cfg.rate_msgs_per_sec = 2500.0;
        assert!(matches!(
            cfg.validate_rate(),
            Err(EmulatorError::RateExceedsBusCapacity(_))
        ));
        cfg.allow_over_capacity = true;
        assert!(cfg.validate_rate().is_ok());
        cfg.rate_msgs_per_sec = 0.0;
        assert!(matches!(cfg.validate_rate(), Err(EmulatorError::InvalidRate(_))));
    }

    #[test]
    fn replay_config_budget_and_log_source() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.log");
        crate::can_frame::write_log_file(&path, &legit(50)).unwrap();
        let mut cfg = ReplayConfig::synthetic(0);
        cfg.source = Source::LogFile(path);
        cfg.frame_budget = Some(20);
        let bus = VirtualBus::new();
        let r = replay(&cfg, &bus, &SimClock::new(), 10).unwrap();
        assert_eq!(r.sent_count, 20);
        assert_eq!(bus.stats().published, 20);
        assert_eq!(r.batch_send_ns.len(), 2);
    }
}
