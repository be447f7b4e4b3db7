use std::sync::Arc;
use std::time::Duration;

use super::monitor::Batcher;
use super::transport::{self, Outcome};
use super::{RunRecord, ScenarioError, ScenarioOptions};
use crate::bus::{BusError, VirtualBus};
use crate::can_frame::CanFrame;
use crate::clock::{Clock, ClockKind, RealClock};
use crate::detector::DetectorConfig;
use crate::emulator::{replay_frames, ReplayReport};

const POLL: Duration = Duration::from_millis(100);

/// Paces `frames` onto a bus from a replay thread while the calling thread
/// acts as the monitor.
pub(super) fn run(
    opts: &ScenarioOptions,
    rate: f64,
    frames: &[CanFrame],
    det: &DetectorConfig,
) -> Result<RunRecord, ScenarioError> {
    let clock: Arc<RealClock> = Arc::new(RealClock::new());
    let bus = VirtualBus::new();
    let sub = bus.subscribe(opts.buffer_capacity);
    let mut transport = transport::build(
        opts.mode.kind,
        opts.mode.queue_capacity,
        opts.launcher.as_ref(),
        det,
        clock.clone(),
    )?;
    let mut batcher = Batcher::new(det.window_size);

    std::thread::scope(|s| {
        let replay = {
            let (bus, clock) = (bus.clone(), Arc::clone(&clock));
            s.spawn(move || {
                let report = replay_frames(frames, rate, &bus, &*clock, det.window_size);
                bus.close();
                report
            })
        };
        let monitored = monitor(&sub, &clock, &mut batcher, &mut *transport);
        if monitored.is_err() {
            bus.close();
        }
        let report = replay
            .join()
            .map_err(|_| ScenarioError::ChannelBroken("replay thread panicked".into()))?;
        monitored?;
        let report: ReplayReport = report?;
        let outcome: Outcome = transport.finish(opts.reap_timeout)?;
        Ok(RunRecord {
            kind: opts.mode.kind,
            clock: ClockKind::Real,
            queue_capacity: opts.mode.queue_capacity,
            buffer_capacity: opts.buffer_capacity,
            rate_msgs_per_sec: rate,
            detector: det.clone(),
            windows: outcome.windows,
            batches_collected: batcher.batches_completed(),
            bus: bus.stats(),
            replay: report,
            queue_dropped: outcome.queue_dropped,
            workers_spawned: outcome.workers_spawned,
            workers_unreaped: outcome.workers_unreaped,
        })
    })
}

fn monitor(
    sub: &crate::bus::BusSubscription,
    clock: &RealClock,
    batcher: &mut Batcher,
    transport: &mut dyn transport::Transport,
) -> Result<(), ScenarioError> {
    loop {
        match sub.next_frame(POLL) {
            Ok(frame) => {
                if let Some(c) = batcher.push(frame, clock.now_ns()) {
                    transport.submit(c)?;
                }
            }
            Err(BusError::Timeout) => {}
            Err(BusError::BusClosed) => return Ok(()),
        }
    }
}
