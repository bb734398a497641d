//! PSTR v1 binary container.
//!
//! Layout (all little-endian):
//!
//! header, 64 bytes:
//!   magic "PSTR" | version u16 | channel_count u16 | sync_rate_hz f64 |
//!   microtime_res_s f64 | macrotime_res_s f64 | duration_s f64 |
//!   record_count u64 | origin u8 | 15 reserved bytes
//!
//! record, 16 bytes:
//!   channel u8 | flags u8 | microtime u16 | reserved u32 | macrotime u64
//!
//! Records on channel 255 are sync/marker events and are dropped on read.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{Origin, PhotonRecord, PhotonStream, StreamError, MARKER_CHANNEL};

pub(crate) const FORMAT_VERSION: u16 = 1;
const MAGIC: [u8; 4] = *b"PSTR";
const HEADER_LEN: usize = 64;
const RECORD_LEN: usize = 16;

/// Reads and validates a PSTR file.
pub fn read_stream<P: AsRef<Path>>(path: P) -> Result<PhotonStream, StreamError> {
    let file = File::open(path)?;
    let mut reader = BufReader::with_capacity(1 << 20, file);

    let mut head = [0u8; HEADER_LEN];
    reader.read_exact(&mut head).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            StreamError::MalformedHeader {
                reason: "file shorter than the 64-byte header".to_string(),
            }
        } else {
            StreamError::Io(e)
        }
    })?;
    if head[0..4] != MAGIC {
        return Err(StreamError::MalformedHeader {
            reason: "bad magic (expected \"PSTR\")".to_string(),
        });
    }
    let u16_at = |o: usize| u16::from_le_bytes(head[o..o + 2].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(head[o..o + 8].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(head[o..o + 8].try_into().unwrap());
    let version = u16_at(4);
    let channel_count = u16_at(6);
    let sync_rate = f64_at(8);
    let microtime_resolution = f64_at(16);
    let macrotime_resolution = f64_at(24);
    let duration = f64_at(32);
    let record_count = u64_at(40);
    let origin = Origin::from_byte(head[48]).ok_or_else(|| StreamError::MalformedHeader {
        reason: format!("unknown origin byte {}", head[48]),
    })?;

    let mut records = Vec::with_capacity(record_count.min(1 << 24) as usize);
    let mut buf = [0u8; RECORD_LEN];
    for found in 0..record_count {
        if let Err(e) = reader.read_exact(&mut buf) {
            if e.kind() == ErrorKind::UnexpectedEof {
                return Err(StreamError::TruncatedFile {
                    expected: record_count,
                    found,
                });
            }
            return Err(StreamError::Io(e));
        }
        let channel = buf[0];
        if channel == MARKER_CHANNEL {
            continue;
        }
        records.push(PhotonRecord {
            channel,
            microtime: u16::from_le_bytes(buf[2..4].try_into().unwrap()),
            macrotime: u64::from_le_bytes(buf[8..16].try_into().unwrap()),
        });
    }
    let mut extra = 0u64;
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        extra += n as u64;
    }
    if extra > 0 {
        return Err(StreamError::TrailingBytes { extra });
    }

    let header = super::StreamHeader {
        version,
        channel_count,
        sync_rate,
        microtime_resolution,
        macrotime_resolution,
        duration,
        record_count: records.len() as u64,
        origin,
    };
    PhotonStream::new(header, records)
}

/// Writes a stream as a PSTR file.
pub fn write_stream<P: AsRef<Path>>(stream: &PhotonStream, path: P) -> Result<(), StreamError> {
    let file = File::create(path)?;
    let mut writer = BufWriter::with_capacity(1 << 20, file);
    let h = &stream.header;

    let mut head = [0u8; HEADER_LEN];
    head[0..4].copy_from_slice(&MAGIC);
    head[4..6].copy_from_slice(&h.version.to_le_bytes());
    head[6..8].copy_from_slice(&h.channel_count.to_le_bytes());
    head[8..16].copy_from_slice(&h.sync_rate.to_le_bytes());
    head[16..24].copy_from_slice(&h.microtime_resolution.to_le_bytes());
    head[24..32].copy_from_slice(&h.macrotime_resolution.to_le_bytes());
    head[32..40].copy_from_slice(&h.duration.to_le_bytes());
    head[40..48].copy_from_slice(&(stream.records.len() as u64).to_le_bytes());
    head[48] = h.origin.to_byte();
    writer.write_all(&head)?;

    let mut buf = [0u8; RECORD_LEN];
    for rec in &stream.records {
        buf[0] = rec.channel;
        buf[2..4].copy_from_slice(&rec.microtime.to_le_bytes());
        buf[8..16].copy_from_slice(&rec.macrotime.to_le_bytes());
        writer.write_all(&buf)?;
    }
    writer.flush()?;
    Ok(())
}
