//! `CANB` batch encoding. All integers little-endian:
//!
//! ```text
//! magic "CANB" | version u8 = 1 | window_index u64 | count u32
//! count x ( timestamp_ns u64 | can_id u32, bit 31 = extended | dlc u8 | data [u8; 8] )
//! ```
//!
//! Batches are self-delimiting, so a byte stream may carry any number of
//! them back to back.

use std::io::{self, Read, Write};

use super::{CanFrame, FrameBatch, FrameError, EXTENDED_FLAG};

pub const BATCH_MAGIC: [u8; 4] = *b"CANB";
pub const BATCH_VERSION: u8 = 1;
pub const BATCH_HEADER_LEN: usize = 17;
pub const FRAME_RECORD_LEN: usize = 21;

pub fn serialize_batch(batch: &FrameBatch) -> Vec<u8> {
    let mut out = Vec::with_capacity(BATCH_HEADER_LEN + FRAME_RECORD_LEN * batch.len());
    out.extend_from_slice(&BATCH_MAGIC);
    out.push(BATCH_VERSION);
    out.extend_from_slice(&batch.window_index().to_le_bytes());
    out.extend_from_slice(&(batch.len() as u32).to_le_bytes());
    for f in batch.frames() {
        out.extend_from_slice(&f.timestamp_ns().to_le_bytes());
        out.extend_from_slice(&f.key().to_le_bytes());
        out.push(f.dlc());
        out.extend_from_slice(f.data());
    }
    out
}

struct Header {
    window_index: u64,
    count: u32,
}

fn parse_header(bytes: &[u8; BATCH_HEADER_LEN]) -> Result<Header, FrameError> {
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != BATCH_MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    if bytes[4] != BATCH_VERSION {
        return Err(FrameError::BadVersion(bytes[4]));
    }
    Ok(Header {
        window_index: u64::from_le_bytes(bytes[5..13].try_into().unwrap()),
        count: u32::from_le_bytes(bytes[13..17].try_into().unwrap()),
    })
}

fn parse_record(rec: &[u8]) -> Result<CanFrame, FrameError> {
    let timestamp_ns = u64::from_le_bytes(rec[0..8].try_into().unwrap());
    let raw_id = u32::from_le_bytes(rec[8..12].try_into().unwrap());
    let dlc = rec[12] as usize;
    if dlc > 8 {
        return Err(FrameError::PayloadTooLong(dlc));
    }
    let extended = raw_id & EXTENDED_FLAG != 0;
    CanFrame::new(timestamp_ns, raw_id & !EXTENDED_FLAG, extended, &rec[13..13 + dlc])
}

fn build_batch(header: Header, body: &[u8]) -> Result<FrameBatch, FrameError> {
    let frames = body
        .chunks_exact(FRAME_RECORD_LEN)
        .map(parse_record)
        .collect::<Result<Vec<_>, _>>()?;
    FrameBatch::new(header.window_index, frames)
}

pub fn deserialize_batch(bytes: &[u8]) -> Result<FrameBatch, FrameError> {
    let head: &[u8; BATCH_HEADER_LEN] =
        bytes
            .get(..BATCH_HEADER_LEN)
            .and_then(|h| h.try_into().ok())
            .ok_or(FrameError::TruncatedPayload {
                declared: 0,
                available: bytes.len(),
            })?;
    let header = parse_header(head)?;
    let body = &bytes[BATCH_HEADER_LEN..];
    let needed = header.count as usize * FRAME_RECORD_LEN;
    if body.len() < needed {
        return Err(FrameError::TruncatedPayload {
            declared: header.count,
            available: body.len(),
        });
    }
    if body.len() > needed {
        return Err(FrameError::TrailingBytes(body.len() - needed));
    }
    build_batch(header, body)
}

/// Reads the next batch from a stream. Returns `Ok(None)` on a clean end of
/// stream at a batch boundary.
pub fn read_batch(reader: &mut impl Read) -> Result<Option<FrameBatch>, FrameError> {
    let mut head = [0u8; BATCH_HEADER_LEN];
    let mut filled = 0;
    while filled < head.len() {
        match reader.read(&mut head[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => {
                return Err(FrameError::TruncatedPayload {
                    declared: 0,
                    available: filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let header = parse_header(&head)?;
    let needed = header.count as usize * FRAME_RECORD_LEN;
    let mut body = Vec::with_capacity(needed);
    reader.take(needed as u64).read_to_end(&mut body)?;
    if body.len() < needed {
        return Err(FrameError::TruncatedPayload {
            declared: header.count,
            available: body.len(),
        });
    }
    build_batch(header, &body).map(Some)
}

pub fn write_batch(writer: &mut impl Write, batch: &FrameBatch) -> io::Result<()> {
    writer.write_all(&serialize_batch(batch))
}
