//! Bounded FIFO shared between exactly one producer side and one consumer.
//! Used for bus subscriptions (drop-newest) and for the monitor-to-detector
//! queue (drop-oldest).

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverflowPolicy {
    /// The arriving item is discarded.
    DropNewest,
    /// The oldest queued item is evicted to make room.
    DropOldest,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BufferCounters {
    pub offered: u64,
    pub accepted: u64,
    pub dropped: u64,
    pub taken: u64,
    pub queued: usize,
}

#[derive(Debug, PartialEq, Eq)]
pub enum PopError {
    Timeout,
    Closed,
}

#[derive(Debug)]
struct State<T> {
    items: VecDeque<T>,
    closed: bool,
    counters: BufferCounters,
}

#[derive(Debug)]
pub struct Bounded<T> {
    capacity: Option<usize>,
    policy: OverflowPolicy,
    state: Mutex<State<T>>,
    ready: Condvar,
}

impl<T> Bounded<T> {
    /// `capacity == None` means unbounded.
    pub fn new(capacity: Option<usize>, policy: OverflowPolicy) -> Self {
        assert!(capacity != Some(0), "capacity must be positive");
        Bounded {
            capacity,
            policy,
            state: Mutex::new(State {
                items: VecDeque::new(),
                closed: false,
                counters: BufferCounters::default(),
            }),
            ready: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, State<T>> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    /// Offers an item. Returns the discarded item when the buffer was full.
    /// Items offered after `close` are discarded without being counted.
    pub fn push(&self, item: T) -> Option<T> {
        let mut st = self.lock();
        if st.closed {
            return Some(item);
        }
        st.counters.offered += 1;
        let full = self.capacity.is_some_and(|cap| st.items.len() >= cap);
        let discarded = match (full, self.policy) {
            (false, _) => {
                st.items.push_back(item);
                st.counters.accepted += 1;
                None
            }
            (true, OverflowPolicy::DropNewest) => {
                st.counters.dropped += 1;
                Some(item)
            }
            (true, OverflowPolicy::DropOldest) => {
                let old = st.items.pop_front();
                st.items.push_back(item);
                st.counters.accepted += 1;
                st.counters.dropped += 1;
                old
            }
        };
        st.counters.queued = st.items.len();
        drop(st);
        if discarded.is_none() || self.policy == OverflowPolicy::DropOldest {
            self.ready.notify_one();
        }
        discarded
    }

    pub fn try_pop(&self) -> Option<T> {
        let mut st = self.lock();
        let item = st.items.pop_front();
        if item.is_some() {
            st.counters.taken += 1;
            st.counters.queued = st.items.len();
        }
        item
    }

    /// Waits up to `timeout` for an item; `None` waits forever. Remaining
    /// items are still delivered after `close`.
    pub fn pop(&self, timeout: Option<Duration>) -> Result<T, PopError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = self.lock();
        loop {
            if let Some(item) = st.items.pop_front() {
                st.counters.taken += 1;
                st.counters.queued = st.items.len();
                return Ok(item);
            }
            if st.closed {
                return Err(PopError::Closed);
            }
            st = match deadline {
                None => self.ready.wait(st).unwrap_or_else(|p| p.into_inner()),
                Some(deadline) => {
                    let now = Instant::now();
                    if now >= deadline {
                        return Err(PopError::Timeout);
                    }
                    self.ready
                        .wait_timeout(st, deadline - now)
                        .unwrap_or_else(|p| p.into_inner())
                        .0
                }
            };
        }
    }

    pub fn close(&self) {
        self.lock().closed = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }

    pub fn counters(&self) -> BufferCounters {
        self.lock().counters
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn drop_newest_keeps_head() {
        let b = Bounded::new(Some(2), OverflowPolicy::DropNewest);
        assert_eq!(b.push(1), None);
        assert_eq!(b.push(2), None);
        assert_eq!(b.push(3), Some(3));
        assert_eq!(b.try_pop(), Some(1));
        let c = b.counters();
        assert_eq!((c.offered, c.accepted, c.dropped, c.taken, c.queued), (3, 2, 1, 1, 1));
    }

    #[test]
    fn drop_oldest_evicts_head() {
        let b = Bounded::new(Some(2), OverflowPolicy::DropOldest);
        b.push(1);
        b.push(2);
        assert_eq!(b.push(3), Some(1));
        assert_eq!(b.try_pop(), Some(2));
        assert_eq!(b.try_pop(), Some(3));
        assert_eq!(b.counters().dropped, 1);
    }

    #[test]
    fn pop_times_out_then_reports_close() {
        let b: Bounded<u8> = Bounded::new(None, OverflowPolicy::DropNewest);
        let start = Instant::now();
        assert_eq!(b.pop(Some(Duration::from_millis(10))), Err(PopError::Timeout));
        assert!(start.elapsed() >= Duration::from_millis(10));
        b.push(7);
        b.close();
        assert_eq!(b.pop(None), Ok(7));
        assert_eq!(b.pop(None), Err(PopError::Closed));
        assert_eq!(b.push(8), Some(8));
    }

    #[test]
    fn wakes_blocked_consumer() {
        let b = Arc::new(Bounded::new(Some(4), OverflowPolicy::DropNewest));
        let consumer = {
            let b = Arc::clone(&b);
            std::thread::spawn(move || {
                let mut got = Vec::new();
                while let Ok(v) = b.pop(None) {
                    got.push(v);
                }
                got
            })
        };
        for i in 0..3 {
            b.push(i);
            std::thread::sleep(Duration::from_millis(2));
        }
        b.close();
        assert_eq!(consumer.join().unwrap(), vec![0, 1, 2]);
    }
}
