//! candump `-L` log lines: `(<secs>.<micros>) <iface> <ID>#<DATA>`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{write_id, CanFrame, FrameError};

const DEFAULT_IFACE: &str = "vcan0";

fn malformed(line: &str, why: &str) -> FrameError {
    FrameError::MalformedLine(format!("{why}: {line:?}"))
}

fn parse_hex_bytes(hex: &str) -> Option<Vec<u8>> {
    if !hex.len().is_multiple_of(2) || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
        return None;
    }
    (0..hex.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&hex[i..i + 2], 16).ok())
        .collect()
}

pub fn parse_log_line(line: &str) -> Result<CanFrame, FrameError> {
    let mut fields = line.split_whitespace();
    let (Some(stamp), Some(_iface), Some(body), None) = (fields.next(), fields.next(), fields.next(), fields.next())
    else {
        return Err(malformed(line, "expected 3 fields"));
    };

    let stamp = stamp
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| malformed(line, "timestamp not parenthesised"))?;
    let (secs, micros) = stamp
        .split_once('.')
        .ok_or_else(|| malformed(line, "timestamp missing fraction"))?;
    if secs.is_empty()
        || micros.len() != 6
        || !secs.bytes().all(|b| b.is_ascii_digit())
        || !micros.bytes().all(|b| b.is_ascii_digit())
    {
        return Err(malformed(line, "timestamp must be <secs>.<6 digits>"));
    }
    let secs: u64 = secs.parse().map_err(|_| malformed(line, "timestamp overflow"))?;
    let micros: u64 = micros.parse().expect("six ascii digits");
    let timestamp_ns = secs
        .checked_mul(1_000_000_000)
        .and_then(|ns| ns.checked_add(micros * 1_000))
        .ok_or_else(|| malformed(line, "timestamp overflow"))?;

    let (id_hex, data_hex) = body.split_once('#').ok_or_else(|| malformed(line, "missing '#'"))?;
    if id_hex.is_empty() || !id_hex.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(malformed(line, "identifier is not hex"));
    }
    let extended = match id_hex.len() {
        3 => false,
        8 => true,
        n => return Err(FrameError::BadIdWidth(n)),
    };
    let can_id = u32::from_str_radix(id_hex, 16).expect("validated hex");

    let payload = parse_hex_bytes(data_hex).ok_or_else(|| malformed(line, "payload is not whole hex bytes"))?;
    CanFrame::new(timestamp_ns, can_id, extended, &payload)
}

pub fn format_log_line(frame: &CanFrame) -> String {
    let micros = frame.timestamp_ns() / 1_000;
    let mut line = format!("({}.{:06}) {DEFAULT_IFACE} ", micros / 1_000_000, micros % 1_000_000);
    write_id(&mut line, frame.key()).expect("write to String");
    line.push('#');
    for b in frame.payload() {
        line.push_str(&format!("{b:02X}"));
    }
    line
}

/// Reads every non-blank line of a candump log. Errors carry the 1-based
/// line number.
pub fn read_log_file(path: impl AsRef<Path>) -> Result<Vec<CanFrame>, FrameError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut frames = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let frame = parse_log_line(&line).map_err(|e| FrameError::AtLine {
            line: n + 1,
            source: Box::new(e),
        })?;
        frames.push(frame);
    }
    Ok(frames)
}

pub fn write_log_file(path: impl AsRef<Path>, frames: &[CanFrame]) -> Result<(), FrameError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for f in frames {
        writeln!(out, "{}", format_log_line(f))?;
    }
    out.flush()?;
    Ok(())
}
