use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{check_event, AnnotationRecord, EventPoint, EventStream};
use crate::error::{io_err, DeoeError, Result};

pub const TEXT_MAGIC: &str = "EVT1";
pub const BINARY_MAGIC: &[u8; 4] = b"EVB1";
const RECORD_BYTES: usize = 13;

fn parse_err(path: &Path, location: String, msg: impl Into<String>) -> DeoeError {
    DeoeError::Parse {
        path: path.to_path_buf(),
        location,
        msg: msg.into(),
    }
}

/// Reads either format, chosen by the leading magic bytes.
pub fn load_events(path: &Path) -> Result<EventStream> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    read_events(&bytes, path)
}

/// `origin` is only used to label errors.
pub fn read_events(bytes: &[u8], origin: &Path) -> Result<EventStream> {
    if bytes.starts_with(BINARY_MAGIC) {
        read_binary(bytes, origin)
    } else {
        read_text(bytes, origin)
    }
}

fn read_text(bytes: &[u8], path: &Path) -> Result<EventStream> {
    let text = std::str::from_utf8(bytes).map_err(|e| {
        parse_err(path, format!("byte {}", e.valid_up_to()), "file is neither UTF-8 text nor binary events")
    })?;
    let mut lines = text.lines().enumerate();
    let (width, height) = match lines.next() {
        Some((_, header)) => {
            let f: Vec<&str> = header.split_whitespace().collect();
            if f.len() != 3 || f[0] != TEXT_MAGIC {
                return Err(parse_err(path, "line 1".into(), format!("expected `{TEXT_MAGIC} <width> <height>`")));
            }
            let dim = |s: &str| {
                s.parse::<u16>()
                    .ok()
                    .filter(|&v| v > 0)
                    .ok_or_else(|| parse_err(path, "line 1".into(), format!("bad sensor dimension `{s}`")))
            };
            (dim(f[1])?, dim(f[2])?)
        }
        None => return Err(parse_err(path, "line 1".into(), "missing header")),
    };
    let mut events = Vec::new();
    let mut last_t = 0u64;
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let loc = || format!("line {}", i + 1);
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(parse_err(path, loc(), format!("expected `t x y p`, got `{line}`")));
        }
        let e = (|| {
            Some(EventPoint::new(f[0].parse().ok()?, f[1].parse().ok()?, f[2].parse().ok()?, f[3].parse().ok()?))
        })()
        .ok_or_else(|| parse_err(path, loc(), format!("malformed record `{line}`")))?;
        check_event(&e, width, height).map_err(|m| parse_err(path, loc(), m))?;
        if e.t < last_t {
            return Err(parse_err(path, loc(), format!("timestamp {} precedes {last_t}", e.t)));
        }
        last_t = e.t;
        events.push(e);
    }
    EventStream::new(width, height, events)
}

fn read_binary(bytes: &[u8], path: &Path) -> Result<EventStream> {
    if bytes.len() < 8 {
        return Err(parse_err(path, "byte 0".into(), "truncated binary header"));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]);
    let height = u16::from_le_bytes([bytes[6], bytes[7]]);
    if width == 0 || height == 0 {
        return Err(parse_err(path, "byte 4".into(), "zero sensor dimension"));
    }
    let body = &bytes[8..];
    if body.len() % RECORD_BYTES != 0 {
        let offset = 8 + body.len() / RECORD_BYTES * RECORD_BYTES;
        return Err(parse_err(path, format!("byte {offset}"), "truncated event record"));
    }
    let mut events = Vec::with_capacity(body.len() / RECORD_BYTES);
    let mut last_t = 0u64;
    for (i, r) in body.chunks_exact(RECORD_BYTES).enumerate() {
        let loc = || format!("byte {}", 8 + i * RECORD_BYTES);
        let e = EventPoint::new(
            u64::from_le_bytes(r[0..8].try_into().expect("8-byte slice")),
            u16::from_le_bytes([r[8], r[9]]),
            u16::from_le_bytes([r[10], r[11]]),
            r[12],
        );
        check_event(&e, width, height).map_err(|m| parse_err(path, loc(), m))?;
        if e.t < last_t {
            return Err(parse_err(path, loc(), format!("timestamp {} precedes {last_t}", e.t)));
        }
        last_t = e.t;
        events.push(e);
    }
    EventStream::new(width, height, events)
}

pub fn write_events_text(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + stream.len() * 16);
    writeln!(out, "{TEXT_MAGIC} {} {}", stream.width(), stream.height()).expect("write to Vec");
    for e in stream.events() {
        writeln!(out, "{} {} {} {}", e.t, e.x, e.y, e.p).expect("write to Vec");
    }
    out
}

pub fn write_events_binary(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + stream.len() * RECORD_BYTES);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&stream.width().to_le_bytes());
    out.extend_from_slice(&stream.height().to_le_bytes());
    for e in stream.events() {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p);
    }
    out
}

/// Text format.
pub fn save_events(stream: &EventStream, path: &Path) -> Result<()> {
    fs::write(path, write_events_text(stream)).map_err(io_err(path))
}

pub fn save_events_binary(stream: &EventStream, path: &Path) -> Result<()> {
    fs::write(path, write_events_binary(stream)).map_err(io_err(path))
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    read_annotations(&text, path)
}

pub fn read_annotations(text: &str, origin: &Path) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("line {}", i + 1);
        let r: AnnotationRecord =
            serde_json::from_str(line).map_err(|e| parse_err(origin, loc.clone(), e.to_string()))?;
        r.validate().map_err(|e| parse_err(origin, loc, e.to_string()))?;
        out.push(r);
    }
    Ok(out)
}

pub fn write_annotations(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("annotation records serialize"));
        out.push('\n');
    }
    out
}

pub fn save_annotations(records: &[AnnotationRecord], path: &Path) -> Result<()> {
    fs::write(path, write_annotations(records)).map_err(io_err(PathBuf::from(path)))
}
