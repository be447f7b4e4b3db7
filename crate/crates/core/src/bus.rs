//! In-process broadcast CAN bus.
//!
//! Every subscription owns a bounded receive FIFO. A frame arriving at a full
//! FIFO is discarded and counted (hardware overrun semantics), which is the
//! only place frames are lost between the emulator and the monitor.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{Bounded, OverflowPolicy, PopError};
use crate::can_frame::CanFrame;

/// Receive FIFO depth used when none is configured.
pub const DEFAULT_BUFFER_CAPACITY: usize = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BusError {
    #[error("bus closed")]
    BusClosed,
    #[error("no frame within timeout")]
    Timeout,
}

#[derive(Debug)]
struct BusInner {
    published: AtomicU64,
    closed: AtomicBool,
    subscriptions: Mutex<Vec<Arc<Bounded<CanFrame>>>>,
}

/// Cheap-to-clone handle to one bus segment.
#[derive(Debug, Clone)]
pub struct VirtualBus {
    inner: Arc<BusInner>,
}

/// Single-consumer receive side of the bus.
#[derive(Debug)]
pub struct BusSubscription {
    fifo: Arc<Bounded<CanFrame>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubscriptionStats {
    pub capacity: usize,
    /// Frames accepted into the FIFO.
    pub received: u64,
    /// Frames discarded because the FIFO was full.
    pub dropped: u64,
    /// Frames taken out of the FIFO by the reader.
    pub consumed: u64,
    pub buffered: usize,
}

impl SubscriptionStats {
    pub fn offered(&self) -> u64 {
        self.received + self.dropped
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusStats {
    pub published: u64,
    pub subscriptions: Vec<SubscriptionStats>,
}

impl Default for VirtualBus {
    fn default() -> Self {
        Self::new()
    }
}

impl VirtualBus {
    pub fn new() -> Self {
        VirtualBus {
            inner: Arc::new(BusInner {
                published: AtomicU64::new(0),
                closed: AtomicBool::new(false),
                subscriptions: Mutex::new(Vec::new()),
            }),
        }
    }

    pub fn subscribe(&self, buffer_capacity: usize) -> BusSubscription {
        assert!(buffer_capacity > 0, "buffer capacity must be positive");
        let fifo = Arc::new(Bounded::new(Some(buffer_capacity), OverflowPolicy::DropNewest));
        let mut subs = self.inner.subscriptions.lock().unwrap();
        if self.inner.closed.load(Ordering::SeqCst) {
            fifo.close();
        }
        subs.push(Arc::clone(&fifo));
        BusSubscription { fifo }
    }

    pub fn publish(&self, frame: CanFrame) -> Result<(), BusError> {
        if self.inner.closed.load(Ordering::SeqCst) {
            return Err(BusError::BusClosed);
        }
        let subs = self.inner.subscriptions.lock().unwrap();
        self.inner.published.fetch_add(1, Ordering::SeqCst);
        for fifo in subs.iter() {
            fifo.push(frame);
        }
        Ok(())
    }

    /// Stops accepting frames. Readers still drain what is buffered and then
    /// see [`BusError::BusClosed`].
    pub fn close(&self) {
        let subs = self.inner.subscriptions.lock().unwrap();
        self.inner.closed.store(true, Ordering::SeqCst);
        for fifo in subs.iter() {
            fifo.close();
        }
    }

    pub fn is_closed(&self) -> bool {
        self.inner.closed.load(Ordering::SeqCst)
    }

    /// Consistent snapshot: publishing is excluded while it is taken.
    pub fn stats(&self) -> BusStats {
        let subs = self.inner.subscriptions.lock().unwrap();
        BusStats {
            published: self.inner.published.load(Ordering::SeqCst),
            subscriptions: subs.iter().map(|f| subscription_stats(f)).collect(),
        }
    }
}

fn subscription_stats(fifo: &Bounded<CanFrame>) -> SubscriptionStats {
    let c = fifo.counters();
    SubscriptionStats {
        capacity: fifo.capacity().expect("bus fifos are bounded"),
        received: c.accepted,
        dropped: c.dropped,
        consumed: c.taken,
        buffered: c.queued,
    }
}

impl BusSubscription {
    /// Oldest buffered frame, waiting at most `timeout`.
    pub fn next_frame(&self, timeout: Duration) -> Result<CanFrame, BusError> {
        self.fifo.pop(Some(timeout)).map_err(|e| match e {
            PopError::Timeout => BusError::Timeout,
            PopError::Closed => BusError::BusClosed,
        })
    }

    pub fn try_next(&self) -> Option<CanFrame> {
        self.fifo.try_pop()
    }

    pub fn stats(&self) -> SubscriptionStats {
        subscription_stats(&self.fifo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{Clock, SimClock};
    use proptest::prelude::*;
    use std::time::Instant;

    fn frame(i: u64) -> CanFrame {
        CanFrame::standard(i, (i % 0x7FF) as u32, &i.to_le_bytes())
    }

    #[test]
    fn fresh_bus_is_zeroed() {
        let bus = VirtualBus::new();
        let _sub = bus.subscribe(16);
        let s = bus.stats();
        assert_eq!(s.published, 0);
        assert_eq!(s.subscriptions[0].received + s.subscriptions[0].dropped, 0);
    }

    #[test]
    fn drained_subscriber_loses_nothing() {
        let bus = VirtualBus::new();
        let sub = bus.subscribe(16);
        for i in 0..5 {
            bus.publish(frame(i)).unwrap();
        }
        for i in 0..5 {
            assert_eq!(sub.next_frame(Duration::ZERO).unwrap(), frame(i));
        }
        let s = sub.stats();
        assert_eq!((s.received, s.dropped), (5, 0));
    }

    #[test]
    fn full_buffer_drops_newest() {
        let bus = VirtualBus::new();
        let sub = bus.subscribe(16);
        for i in 0..20 {
            bus.publish(frame(i)).unwrap();
        }
        let s = bus.stats();
        assert_eq!(s.published, 20);
        assert_eq!((s.subscriptions[0].received, s.subscriptions[0].dropped), (16, 4));
        assert_eq!(sub.try_next(), Some(frame(0)));
    }

    #[test]
    fn hundred_in_hundred_out() {
        let bus = VirtualBus::new();
        let sub = bus.subscribe(128);
        (0..100).for_each(|i| bus.publish(frame(i)).unwrap());
        while sub.try_next().is_some() {}
        let s = bus.stats();
        assert_eq!(s.published, 100);
        assert_eq!((s.subscriptions[0].received, s.subscriptions[0].dropped), (100, 0));
        assert_eq!(s.subscriptions[0].consumed, 100);
    }

    #[test]
    fn timeout_and_close() {
        let bus = VirtualBus::new();
        let sub = bus.subscribe(4);
        let start = Instant::now();
        assert_eq!(sub.next_frame(Duration::from_millis(10)), Err(BusError::Timeout));
        assert!(start.elapsed() >= Duration::from_millis(10));
        bus.publish(frame(1)).unwrap();
        bus.close();
        assert_eq!(bus.publish(frame(2)), Err(BusError::BusClosed));
        assert_eq!(sub.next_frame(Duration::ZERO), Ok(frame(1)));
        assert_eq!(sub.next_frame(Duration::ZERO), Err(BusError::BusClosed));
    }

    /// Independent arithmetic model of a reader that stops for `blocked_ms`
    /// while a publisher emits one frame per millisecond.
    fn blocked_reader_oracle(rate_per_s: u64, blocked_ms: u64, capacity: u64) -> (u64, u64) {
        let arrivals = blocked_ms * rate_per_s / 1000;
        let kept = arrivals.min(capacity);
        (kept, arrivals - kept)
    }

    #[test]
    fn blocked_reader_drop_count_matches_event_model() {
        let clock = SimClock::new();
        let bus = VirtualBus::new();
        let sub = bus.subscribe(16);
        let mut delivered = 0u64;
        let blocked_until = 150_000_000u64;
        for k in 0..1000u64 {
            clock.advance_to(k * 1_000_000);
            let reading = clock.now_ns() >= blocked_until;
            if reading {
                while sub.try_next().is_some() {
                    delivered += 1;
                }
            }
            bus.publish(frame(k)).unwrap();
            if reading {
                while sub.try_next().is_some() {
                    delivered += 1;
                }
            }
        }
        let (kept, dropped) = blocked_reader_oracle(1000, 150, 16);
        let s = sub.stats();
        assert_eq!(s.dropped, dropped);
        assert_eq!(dropped, 134);
        assert_eq!(delivered, 1000 - dropped);
        assert_eq!(kept, 16);
    }

    #[test]
    fn blocked_reader_real_time() {
        let bus = VirtualBus::new();
        let sub = bus.subscribe(16);
        let publisher = {
            let bus = bus.clone();
            std::thread::spawn(move || {
                let start = Instant::now();
                for k in 0..300u64 {
                    let due = start + Duration::from_millis(k);
                    if let Some(wait) = due.checked_duration_since(Instant::now()) {
                        std::thread::sleep(wait);
                    }
                    bus.publish(frame(k)).unwrap();
                }
                bus.close();
            })
        };
        std::thread::sleep(Duration::from_millis(150));
        while sub.next_frame(Duration::from_secs(5)).is_ok() {}
        publisher.join().unwrap();
        let s = sub.stats();
        assert_eq!(s.received + s.dropped, 300);
        assert!((120..=140).contains(&s.dropped), "dropped {}", s.dropped);
    }

    #[test]
    fn fast_reader_sees_everything_in_order() {
        let bus = VirtualBus::new();
        let sub = bus.subscribe(64);
        let reader = std::thread::spawn(move || {
            let mut got = Vec::with_capacity(10_000);
            while let Ok(f) = sub.next_frame(Duration::from_secs(5)) {
                got.push(f.timestamp_ns());
            }
            (got, sub.stats())
        });
        for k in 0..10_000u64 {
            bus.publish(frame(k)).unwrap();
            if k % 32 == 31 {
                // keep the producer from outrunning the reader on one core
                std::thread::sleep(Duration::from_micros(200));
            }
        }
        bus.close();
        let (got, stats) = reader.join().unwrap();
        assert_eq!(stats.dropped, 0);
        assert_eq!(got, (0..10_000).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn conservation_and_fifo(ops in proptest::collection::vec(any::<bool>(), 0..400), cap in 1usize..20) {
            let bus = VirtualBus::new();
            let sub = bus.subscribe(cap);
            let late = {
                let mut seen = Vec::new();
                let mut next = 0u64;
                let mut late: Option<BusSubscription> = None;
                for (i, publish) in ops.iter().enumerate() {
                    if i == ops.len() / 2 {
                        late = Some(bus.subscribe(cap));
                    }
                    if *publish {
                        bus.publish(frame(next)).unwrap();
                        next += 1;
                    } else if let Some(f) = sub.try_next() {
                        seen.push(f.timestamp_ns());
                    }
                    let s = sub.stats();
                    prop_assert_eq!(s.received + s.dropped, next);
                    prop_assert!(s.buffered <= cap);
                }
                prop_assert!(seen.windows(2).all(|w| w[0] < w[1]));
                late
            };
            let stats = bus.stats();
            if let (Some(late), Some(ls)) = (late, stats.subscriptions.get(1)) {
                prop_assert!(ls.offered() <= stats.published);
                prop_assert_eq!(late.stats().offered(), ls.offered());
            }
        }
    }
}
