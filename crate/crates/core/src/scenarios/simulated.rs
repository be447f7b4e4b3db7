//! Discrete-event execution on a simulated clock.
//!
//! Frame `k` is published on a real [`VirtualBus`] at `k / rate`. The monitor
//! reads every frame at its publish instant unless it is busy; in the inline
//! architecture it is busy for the evaluation time after each window, and
//! frames arriving meanwhile pile up in (and overflow) its receive FIFO.
//! Evaluation takes exactly the configured padding. Verdicts are produced by
//! the architecture's real transport; only their timestamps are modelled.

use std::collections::VecDeque;
use std::sync::Arc;

use super::monitor::{Batcher, Collected};
use super::transport;
use super::{RunRecord, ScenarioError, ScenarioKind, ScenarioOptions};
use crate::bus::VirtualBus;
use crate::can_frame::CanFrame;
use crate::clock::{ClockKind, SimClock};
use crate::detector::DetectorConfig;
use crate::emulator::{slot_offset_ns, ReplayReport};

/// Modelled evaluation interval of one window that reached a detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    start_ns: u64,
    end_ns: u64,
}

pub(super) fn run(
    opts: &ScenarioOptions,
    rate: f64,
    frames: &[CanFrame],
    det: &DetectorConfig,
) -> Result<RunRecord, ScenarioError> {
    let kind = opts.mode.kind;
    let eval_ns = det.eval_padding.as_nanos() as u64;
    let w = det.window_size;
    let clock = Arc::new(SimClock::new());
    let bus = VirtualBus::new();
    let sub = bus.subscribe(opts.buffer_capacity);
    let mut batcher = Batcher::new(w);
    let mut collected = Vec::new();
    // Inline only: when the monitor is next able to read.
    let mut free_at = 0u64;
    let inline = kind == ScenarioKind::S1Inline;

    let mut read = |frame: CanFrame, at: u64, free_at: &mut u64| {
        if let Some(c) = batcher.push(frame, at) {
            if inline {
                *free_at = c.collect_end_ns + eval_ns;
            }
            collected.push(c);
        }
    };
    for (k, frame) in frames.iter().enumerate() {
        let t = slot_offset_ns(k as u64, rate);
        clock.advance_to(t);
        while free_at <= t {
            match sub.try_next() {
                Some(f) => read(f, free_at.max(f.timestamp_ns()), &mut free_at),
                None => break,
            }
        }
        bus.publish(frame.with_timestamp(t))?;
        if free_at <= t {
            let f = sub.try_next().expect("idle monitor has the frame just published");
            read(f, t, &mut free_at);
        }
    }
    while let Some(f) = sub.try_next() {
        read(f, free_at, &mut free_at);
    }
    bus.close();
    let end_ns = slot_offset_ns(frames.len() as u64, rate);
    clock.advance_to(end_ns);
    let batches_collected = batcher.batches_completed();

    let (slots, queue_dropped) = schedule(kind, opts.mode.queue_capacity, &collected, eval_ns);
    // Timing is modelled, so the real transport evaluates without padding
    // and without a queue that could shed work.
    let exec_det = DetectorConfig {
        eval_padding: std::time::Duration::ZERO,
        ..det.clone()
    };
    let mut transport = transport::build(kind, None, opts.launcher.as_ref(), &exec_det, clock.clone())?;
    let mut timing = std::collections::HashMap::new();
    for (c, slot) in collected.into_iter().zip(slots) {
        if let Some(slot) = slot {
            timing.insert(c.batch.window_index(), slot);
            transport.submit(c)?;
        }
    }
    let outcome = transport.finish(opts.reap_timeout)?;
    let mut windows = outcome.windows;
    for w in &mut windows {
        let slot = timing[&w.window];
        w.eval_end_ns = slot.end_ns;
        w.verdict.eval_started_ns = slot.start_ns;
        w.verdict.eval_finished_ns = slot.end_ns;
    }

    Ok(RunRecord {
        kind,
        clock: ClockKind::Simulated,
        queue_capacity: opts.mode.queue_capacity,
        buffer_capacity: opts.buffer_capacity,
        rate_msgs_per_sec: rate,
        detector: det.clone(),
        windows,
        batches_collected,
        bus: bus.stats(),
        replay: replay_report(frames.len(), rate, w),
        queue_dropped,
        workers_spawned: outcome.workers_spawned,
        workers_unreaped: outcome.workers_unreaped,
    })
}

/// What the emulator would report for an undisturbed replay.
fn replay_report(len: usize, rate: f64, w: usize) -> ReplayReport {
    let at = |k: usize| slot_offset_ns(k as u64, rate);
    ReplayReport {
        sent_count: len as u64,
        elapsed_ns: at(len),
        batch_send_ns: (0..len / w).map(|j| at((j + 1) * w) - at(j * w)).collect(),
    }
}

/// Evaluation intervals per collected window (`None` when the window was
/// evicted from the queue) and the number evicted.
fn schedule(
    kind: ScenarioKind,
    capacity: Option<usize>,
    collected: &[Collected],
    eval_ns: u64,
) -> (Vec<Option<Slot>>, u64) {
    let mut slots = vec![None; collected.len()];
    match kind {
        ScenarioKind::S1Inline | ScenarioKind::S2WorkerPerBatch => {
            for (slot, c) in slots.iter_mut().zip(collected) {
                *slot = Some(Slot {
                    start_ns: c.collect_end_ns,
                    end_ns: c.collect_end_ns + eval_ns,
                });
            }
            (slots, 0)
        }
        ScenarioKind::S3TwoTasksOneProcess | ScenarioKind::S4TwoProcesses => {
            let mut queue: VecDeque<usize> = VecDeque::new();
            let mut detector_free = 0u64;
            let mut dropped = 0;
            let mut serve = |queue: &mut VecDeque<usize>, until: Option<u64>, slots: &mut Vec<Option<Slot>>| {
                while let Some(&i) = queue.front() {
                    let start = detector_free.max(collected[i].collect_end_ns);
                    if until.is_some_and(|t| start > t) {
                        break;
                    }
                    queue.pop_front();
                    detector_free = start + eval_ns;
                    slots[i] = Some(Slot {
                        start_ns: start,
                        end_ns: detector_free,
                    });
                }
            };
            for (i, c) in collected.iter().enumerate() {
                serve(&mut queue, Some(c.collect_end_ns), &mut slots);
                queue.push_back(i);
                if capacity.is_some_and(|cap| queue.len() > cap) {
                    queue.pop_front();
                    dropped += 1;
                }
                serve(&mut queue, Some(c.collect_end_ns), &mut slots);
            }
            serve(&mut queue, None, &mut slots);
            (slots, dropped)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::can_frame::FrameBatch;

    fn collected(ends: &[u64]) -> Vec<Collected> {
        ends.iter()
            .enumerate()
            .map(|(i, &end)| Collected {
                batch: FrameBatch::new(i as u64, vec![CanFrame::standard(end, 1, &[])]).unwrap(),
                collect_start_ns: end,
                collect_end_ns: end,
            })
            .collect()
    }

    #[test]
    fn queue_keeps_up_when_eval_is_short() {
        let c = collected(&[100, 200, 300]);
        let (slots, dropped) = schedule(ScenarioKind::S3TwoTasksOneProcess, Some(1), &c, 50);
        assert_eq!(dropped, 0);
        let ends: Vec<_> = slots.iter().map(|s| s.unwrap().end_ns).collect();
        assert_eq!(ends, [150, 250, 350]);
    }

    #[test]
    fn full_queue_drops_oldest_waiting() {
        // Service of 250 with room for one waiter: window 2 evicts 1 while
        // window 0 is being evaluated.
        let c = collected(&[0, 100, 200, 300]);
        let (slots, dropped) = schedule(ScenarioKind::S4TwoProcesses, Some(1), &c, 250);
        assert_eq!(dropped, 1);
        assert_eq!(
            slots[0],
            Some(Slot {
                start_ns: 0,
                end_ns: 250
            })
        );
        assert_eq!(slots[1], None);
        assert_eq!(
            slots[2],
            Some(Slot {
                start_ns: 250,
                end_ns: 500
            })
        );
        assert_eq!(
            slots[3],
            Some(Slot {
                start_ns: 500,
                end_ns: 750
            })
        );
    }

    #[test]
    fn unbounded_queue_serves_everything_in_order() {
        let c = collected(&[0, 10, 20]);
        let (slots, dropped) = schedule(ScenarioKind::S3TwoTasksOneProcess, None, &c, 100);
        assert_eq!(dropped, 0);
        let ends: Vec<_> = slots.iter().map(|s| s.unwrap().end_ns).collect();
        assert_eq!(ends, [100, 200, 300]);
    }
}
