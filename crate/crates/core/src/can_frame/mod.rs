//! CAN frame value types, candump-style log ingestion and the `CANB`
//! batch wire format used between monitor and detector processes.

mod log;
mod wire;

pub use self::log::{format_log_line, parse_log_line, read_log_file, write_log_file};
pub use self::wire::{
    deserialize_batch, read_batch, serialize_batch, write_batch, BATCH_HEADER_LEN, BATCH_MAGIC, BATCH_VERSION,
    FRAME_RECORD_LEN,
};

use std::fmt;

use thiserror::Error;

/// Largest standard (11-bit) identifier plus one.
pub const STANDARD_ID_LIMIT: u32 = 1 << 11;
/// Largest extended (29-bit) identifier plus one.
pub const EXTENDED_ID_LIMIT: u32 = 1 << 29;
/// Bit used to tag extended identifiers in packed keys and on the wire.
pub const EXTENDED_FLAG: u32 = 1 << 31;
/// Classic CAN payload limit.
pub const MAX_DLC: u8 = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("malformed log line: {0}")]
    MalformedLine(String),
    #[error("identifier must be 3 (standard) or 8 (extended) hex digits, got {0}")]
    BadIdWidth(usize),
    #[error("identifier {id:#X} out of range for {} frame", if *.extended { "extended" } else { "standard" })]
    IdOutOfRange { id: u32, extended: bool },
    #[error("payload of {0} bytes exceeds 8")]
    PayloadTooLong(usize),
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<FrameError>,
    },
    #[error("i/o error: {0}")]
    Io(String),
    #[error("bad batch magic {0:02X?}")]
    BadMagic([u8; 4]),
    #[error("unsupported batch version {0}")]
    BadVersion(u8),
    #[error("batch declares {declared} frames but only {available} bytes of frame data follow")]
    TruncatedPayload { declared: u32, available: usize },
    #[error("{0} unexpected bytes after batch")]
    TrailingBytes(usize),
    #[error("frame {index} has timestamp earlier than its predecessor")]
    UnorderedBatch { index: usize },
}

impl From<std::io::Error> for FrameError {
    fn from(err: std::io::Error) -> Self {
        FrameError::Io(err.to_string())
    }
}

/// One classic CAN data frame.
///
/// Construction validates the identifier width and DLC, and bytes past the
/// DLC are always zero, so two frames compare equal iff they carry the same
/// message.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct CanFrame {
    timestamp_ns: u64,
    can_id: u32,
    extended: bool,
    dlc: u8,
    data: [u8; 8],
}

impl CanFrame {
    pub fn new(timestamp_ns: u64, can_id: u32, extended: bool, payload: &[u8]) -> Result<Self, FrameError> {
        let limit = if extended { EXTENDED_ID_LIMIT } else { STANDARD_ID_LIMIT };
        if can_id >= limit {
            return Err(FrameError::IdOutOfRange { id: can_id, extended });
        }
        if payload.len() > MAX_DLC as usize {
            return Err(FrameError::PayloadTooLong(payload.len()));
        }
        let mut data = [0u8; 8];
        data[..payload.len()].copy_from_slice(payload);
        Ok(CanFrame {
            timestamp_ns,
            can_id,
            extended,
            dlc: payload.len() as u8,
            data,
        })
    }

    /// Standard-ID frame; panics on an invalid id or payload. Meant for
    /// fixtures and generators with known-good constants.
    pub fn standard(timestamp_ns: u64, can_id: u32, payload: &[u8]) -> Self {
        Self::new(timestamp_ns, can_id, false, payload).expect("valid standard frame")
    }

    pub fn timestamp_ns(&self) -> u64 {
        self.timestamp_ns
    }

    pub fn can_id(&self) -> u32 {
        self.can_id
    }

    pub fn is_extended(&self) -> bool {
        self.extended
    }

    pub fn dlc(&self) -> u8 {
        self.dlc
    }

    pub fn payload(&self) -> &[u8] {
        &self.data[..self.dlc as usize]
    }

    /// Full 8-byte data field, zero-padded past the DLC.
    pub fn data(&self) -> &[u8; 8] {
        &self.data
    }

    /// Identifier with bit 31 set for extended frames. Standard and extended
    /// frames with the same numeric id are distinct messages.
    pub fn key(&self) -> u32 {
        if self.extended {
            self.can_id | EXTENDED_FLAG
        } else {
            self.can_id
        }
    }

    pub fn with_timestamp(mut self, timestamp_ns: u64) -> Self {
        self.timestamp_ns = timestamp_ns;
        self
    }
}

impl fmt::Debug for CanFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CanFrame({} ", self.timestamp_ns)?;
        write_id(f, self.key())?;
        write!(f, "#")?;
        for b in self.payload() {
            write!(f, "{b:02X}")?;
        }
        write!(f, ")")
    }
}

/// Writes a packed key as 3 or 8 hex digits depending on the extended flag.
pub(crate) fn write_id(out: &mut impl fmt::Write, key: u32) -> fmt::Result {
    if key & EXTENDED_FLAG != 0 {
        write!(out, "{:08X}", key & !EXTENDED_FLAG)
    } else {
        write!(out, "{:03X}", key)
    }
}

/// Formats a packed key the way the log format prints identifiers.
pub fn format_key(key: u32) -> String {
    let mut s = String::with_capacity(8);
    write_id(&mut s, key).expect("write to String");
    s
}

/// A window of consecutively collected frames, numbered by window index.
///
/// Frame timestamps are collection times, so the batch's first/last
/// collection instants are those of its first and last frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameBatch {
    window_index: u64,
    frames: Vec<CanFrame>,
}

impl FrameBatch {
    pub fn new(window_index: u64, frames: Vec<CanFrame>) -> Result<Self, FrameError> {
        if let Some(index) = frames
            .windows(2)
            .position(|pair| pair[1].timestamp_ns < pair[0].timestamp_ns)
        {
            return Err(FrameError::UnorderedBatch { index: index + 1 });
        }
        Ok(FrameBatch { window_index, frames })
    }

    pub fn window_index(&self) -> u64 {
        self.window_index
    }

    pub fn frames(&self) -> &[CanFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn first_collect_ns(&self) -> u64 {
        self.frames.first().map_or(0, CanFrame::timestamp_ns)
    }

    pub fn last_collect_ns(&self) -> u64 {
        self.frames.last().map_or(0, CanFrame::timestamp_ns)
    }

    pub fn into_frames(self) -> Vec<CanFrame> {
        self.frames
    }
}

/// Splits a frame stream into consecutive full windows of `w` frames,
/// discarding a trailing partial window.
pub fn windows_of(frames: &[CanFrame], w: usize) -> Result<Vec<FrameBatch>, FrameError> {
    assert!(w > 0, "window size must be positive");
    frames
        .chunks_exact(w)
        .enumerate()
        .map(|(i, chunk)| FrameBatch::new(i as u64, chunk.to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_ids() {
        assert!(CanFrame::new(0, 0x7FF, false, &[]).is_ok());
        assert_eq!(
            CanFrame::new(0, 0x800, false, &[]),
            Err(FrameError::IdOutOfRange {
                id: 0x800,
                extended: false
            })
        );
        assert!(CanFrame::new(0, 0x1FFF_FFFF, true, &[]).is_ok());
        assert!(CanFrame::new(0, 0x2000_0000, true, &[]).is_err());
    }

    #[test]
    fn payload_is_zero_padded() {
        let f = CanFrame::new(0, 1, false, &[0xAA, 0xBB]).unwrap();
        assert_eq!(f.dlc(), 2);
        assert_eq!(f.data(), &[0xAA, 0xBB, 0, 0, 0, 0, 0, 0]);
        assert_eq!(CanFrame::new(0, 1, false, &[0; 9]), Err(FrameError::PayloadTooLong(9)));
    }

    #[test]
    fn key_separates_standard_and_extended() {
        let s = CanFrame::new(0, 0x244, false, &[]).unwrap();
        let e = CanFrame::new(0, 0x244, true, &[]).unwrap();
        assert_ne!(s.key(), e.key());
        assert_eq!(format_key(s.key()), "244");
        assert_eq!(format_key(e.key()), "00000244");
    }

    #[test]
    fn batch_requires_ordered_timestamps() {
        let a = CanFrame::standard(5, 1, &[]);
        let b = CanFrame::standard(3, 2, &[]);
        assert_eq!(
            FrameBatch::new(0, vec![a, b]),
            Err(FrameError::UnorderedBatch { index: 1 })
        );
        let batch = FrameBatch::new(4, vec![b, a]).unwrap();
        assert_eq!(batch.first_collect_ns(), 3);
        assert_eq!(batch.last_collect_ns(), 5);
    }

    #[test]
    fn windows_drop_partial_tail() {
        let frames: Vec<_> = (0..7).map(|i| CanFrame::standard(i, 1, &[])).collect();
        let w = windows_of(&frames, 3).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].window_index(), 1);
        assert_eq!(w[1].frames()[0].timestamp_ns(), 3);
    }
}
