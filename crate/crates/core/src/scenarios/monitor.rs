use crate::can_frame::{CanFrame, FrameBatch};

/// A complete window as handed from the monitor to a detector.
#[derive(Debug, Clone)]
pub struct Collected {
    pub batch: FrameBatch,
    pub collect_start_ns: u64,
    pub collect_end_ns: u64,
}

/// Groups frames read by the monitor into consecutive windows. Frames are
/// restamped with the time the monitor read them.
#[derive(Debug)]
pub struct Batcher {
    window_size: usize,
    next_index: u64,
    pending: Vec<CanFrame>,
}

impl Batcher {
    pub fn new(window_size: usize) -> Self {
        assert!(window_size > 0, "window size must be positive");
        Batcher {
            window_size,
            next_index: 0,
            pending: Vec::with_capacity(window_size),
        }
    }

    /// Adds a frame read at `read_ns`; returns the window it completes.
    pub fn push(&mut self, frame: CanFrame, read_ns: u64) -> Option<Collected> {
        self.pending.push(frame.with_timestamp(read_ns));
        if self.pending.len() < self.window_size {
            return None;
        }
        let frames = std::mem::replace(&mut self.pending, Vec::with_capacity(self.window_size));
        let batch = FrameBatch::new(self.next_index, frames).expect("read times are monotonic");
        self.next_index += 1;
        Some(Collected {
            collect_start_ns: batch.first_collect_ns(),
            collect_end_ns: batch.last_collect_ns(),
            batch,
        })
    }

    pub fn batches_completed(&self) -> u64 {
        self.next_index
    }

    /// Frames read since the last complete window.
    pub fn partial_len(&self) -> usize {
        self.pending.len()
    }
}
