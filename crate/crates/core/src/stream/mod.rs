//! Time-tagged photon records and the PSTR stream container.
//!
//! A stream is a header plus a time-ordered vector of records. Each record
//! carries a detector channel, a coarse macrotime tick and a microtime (TCSPC
//! ticks since the last sync pulse); the absolute arrival time is
//! `macrotime * macrotime_resolution + microtime * microtime_resolution`.

mod csv;
mod pstr;

pub use csv::import_csv;
pub use pstr::{read_stream, write_stream};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Channel value reserved for sync/marker records; dropped on read.
pub const MARKER_CHANNEL: u8 = 255;

/// Errors raised while reading, constructing or slicing photon streams.
#[derive(Debug, Error)]
pub enum StreamError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {reason}")]
    MalformedHeader { reason: String },
    #[error("truncated file: expected {expected} records, found {found}")]
    TruncatedFile { expected: u64, found: u64 },
    #[error("file has {extra} trailing bytes after the declared records")]
    TrailingBytes { extra: u64 },
    #[error("record {index} is earlier than its predecessor")]
    OutOfOrderRecord { index: usize },
    #[error("record {index} duplicates the timestamp of an earlier record on channel {channel}")]
    DuplicateTimestamp { index: usize, channel: u8 },
    #[error(
        "record {index} has channel {channel}, but the header declares {channel_count} channels"
    )]
    InvalidChannel {
        index: usize,
        channel: u8,
        channel_count: u16,
    },
    #[error("record {index} has microtime {microtime} spilling past the sync period")]
    MicrotimeOverflow { index: usize, microtime: u16 },
    #[error("csv parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid window [{t0}, {t1}) for a stream of duration {duration}")]
    InvalidWindow { t0: f64, t1: f64, duration: f64 },
}

/// Where a stream came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Simulated,
    Imported,
}

impl Origin {
    pub(crate) fn to_byte(self) -> u8 {
        match self {
            Origin::Simulated => 0,
            Origin::Imported => 1,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Origin::Simulated),
            1 => Some(Origin::Imported),
            _ => None,
        }
    }
}

/// One detection event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhotonRecord {
    /// Detector channel (0-based; 255 is reserved for markers).
    pub channel: u8,
    /// Coarse clock ticks of `macrotime_resolution` seconds.
    pub macrotime: u64,
    /// TCSPC ticks of `microtime_resolution` seconds since the last sync pulse.
    pub microtime: u16,
}

/// Acquisition metadata shared by every record of a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamHeader {
    /// Container format version; currently always 1.
    pub version: u16,
    /// Number of detector channels (records must use 0..channel_count).
    pub channel_count: u16,
    /// Excitation sync rate in Hz.
    pub sync_rate: f64,
    /// Microtime tick in seconds.
    pub microtime_resolution: f64,
    /// Macrotime tick in seconds.
    pub macrotime_resolution: f64,
    /// Acquisition duration in seconds.
    pub duration: f64,
    /// Number of records in the stream.
    pub record_count: u64,
    /// Provenance of the data.
    pub origin: Origin,
}

impl StreamHeader {
    /// Sync period 1/sync_rate in seconds.
    pub fn sync_period(&self) -> f64 {
        1.0 / self.sync_rate
    }

    /// Number of representable microtime slots within one sync period
    /// (largest m with m * microtime_resolution < sync_period, plus one).
    pub fn microtime_slots(&self) -> u32 {
        let ratio = self.sync_period() / self.microtime_resolution;
        ((ratio - 1e-9).floor() as u32).saturating_add(1)
    }

    fn validate(&self) -> Result<(), StreamError> {
        let fail = |reason: &str| StreamError::MalformedHeader {
            reason: reason.to_string(),
        };
        if self.version != pstr::FORMAT_VERSION {
            return Err(fail(&format!("unsupported version {}", self.version)));
        }
        if self.channel_count == 0 || self.channel_count > MARKER_CHANNEL as u16 {
            return Err(fail("channel_count must be in 1..=254"));
        }
        if !(self.sync_rate.is_finite() && self.sync_rate > 0.0) {
            return Err(fail("sync_rate must be positive"));
        }
        if !(self.microtime_resolution.is_finite() && self.microtime_resolution > 0.0) {
            return Err(fail("microtime_resolution must be positive"));
        }
        if !(self.macrotime_resolution.is_finite() && self.macrotime_resolution > 0.0) {
            return Err(fail("macrotime_resolution must be positive"));
        }
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return Err(fail("duration must be non-negative"));
        }
        Ok(())
    }
}

/// A validated, time-ordered photon stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotonStream {
    pub header: StreamHeader,
    pub records: Vec<PhotonRecord>,
}

impl PhotonStream {
    /// Builds a stream after checking every container invariant: header
    /// sanity, channel range, microtime within the sync period, records
    /// sorted by absolute time, and same-channel timestamps strictly
    /// increasing.
    pub fn new(mut header: StreamHeader, records: Vec<PhotonRecord>) -> Result<Self, StreamError> {
        header.record_count = records.len() as u64;
        header.validate()?;
        let stream = PhotonStream { header, records };
        stream.validate_records()?;
        Ok(stream)
    }

    fn validate_records(&self) -> Result<(), StreamError> {
        let h = &self.header;
        let period = h.sync_period();
        let mut prev_abs = f64::NEG_INFINITY;
        let mut prev: Option<&PhotonRecord> = None;
        for (index, rec) in self.records.iter().enumerate() {
            if rec.channel as u16 >= h.channel_count {
                return Err(StreamError::InvalidChannel {
                    index,
                    channel: rec.channel,
                    channel_count: h.channel_count,
                });
            }
            if rec.microtime as f64 * h.microtime_resolution >= period {
                return Err(StreamError::MicrotimeOverflow {
                    index,
                    microtime: rec.microtime,
                });
            }
            let abs = self.abs_time(rec);
            if abs < prev_abs {
                return Err(StreamError::OutOfOrderRecord { index });
            }
            if let Some(p) = prev {
                if p.macrotime == rec.macrotime
                    && p.microtime == rec.microtime
                    && p.channel == rec.channel
                {
                    return Err(StreamError::DuplicateTimestamp {
                        index,
                        channel: rec.channel,
                    });
                }
            }
            prev_abs = abs;
            prev = Some(rec);
        }
        Ok(())
    }

    /// Absolute arrival time of a record in seconds.
    pub fn abs_time(&self, rec: &PhotonRecord) -> f64 {
        rec.macrotime as f64 * self.header.macrotime_resolution
            + rec.microtime as f64 * self.header.microtime_resolution
    }

    /// Absolute arrival times of all records, in order.
    pub fn abs_times(&self) -> Vec<f64> {
        self.records.iter().map(|r| self.abs_time(r)).collect()
    }

    /// Records on one channel, as absolute times.
    pub fn channel_times(&self, channel: u8) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.channel == channel)
            .map(|r| self.abs_time(r))
            .collect()
    }

    /// Number of records on one channel.
    pub fn channel_count_of(&self, channel: u8) -> u64 {
        self.records.iter().filter(|r| r.channel == channel).count() as u64
    }

    /// Extracts the sub-stream with absolute times in `[t0, t1)`.
    ///
    /// Bounds must satisfy `0 <= t0 < t1 <= duration`. Macrotimes are
    /// re-based by `floor(t0 / macrotime_resolution)` ticks (clamped so no
    /// tick underflows) and the duration becomes `t1 - t0`.
    pub fn window(&self, t0: f64, t1: f64) -> Result<PhotonStream, StreamError> {
        if !(t0.is_finite() && t1.is_finite()) || t0 < 0.0 || t0 >= t1 || t1 > self.header.duration
        {
            return Err(StreamError::InvalidWindow {
                t0,
                t1,
                duration: self.header.duration,
            });
        }
        let selected: Vec<PhotonRecord> = self
            .records
            .iter()
            .filter(|r| {
                let t = self.abs_time(r);
                t >= t0 && t < t1
            })
            .copied()
            .collect();
        // The 1e-9 nudge keeps grid-aligned offsets from flooring one tick
        // low after the division rounds.
        let mut delta = (t0 / self.header.macrotime_resolution + 1e-9).floor() as u64;
        if let Some(min_macro) = selected.iter().map(|r| r.macrotime).min() {
            delta = delta.min(min_macro);
        }
        let records: Vec<PhotonRecord> = selected
            .into_iter()
            .map(|mut r| {
                r.macrotime -= delta;
                r
            })
            .collect();
        let mut header = self.header.clone();
        header.duration = t1 - t0;
        PhotonStream::new(header, records)
    }
}
