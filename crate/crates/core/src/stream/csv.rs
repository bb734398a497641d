//! CSV import for photon records.
//!
//! Expected columns are `channel,macrotime,microtime` (integers); a single
//! leading header line is detected and skipped. The CSV itself carries no
//! acquisition metadata, so the caller supplies a header template.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::{Origin, PhotonRecord, PhotonStream, StreamError, StreamHeader, MARKER_CHANNEL};

/// Imports records from a CSV file.
///
/// `template` provides the acquisition metadata; its origin and record count
/// are overwritten. With `sort` set, records are re-ordered by arrival time
/// before validation, which repairs files written out of order.
pub fn import_csv<P: AsRef<Path>>(
    path: P,
    template: StreamHeader,
    sort: bool,
) -> Result<PhotonStream, StreamError> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);

    let mut records: Vec<PhotonRecord> = Vec::new();
    let mut seen_data = false;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if !seen_data && fields[0].parse::<u8>().is_err() {
            // Header line such as "channel,macrotime,microtime".
            seen_data = true;
            continue;
        }
        seen_data = true;
        if fields.len() != 3 {
            return Err(StreamError::Parse {
                line: line_no,
                reason: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let parse_err = |what: &str, e: std::num::ParseIntError| StreamError::Parse {
            line: line_no,
            reason: format!("{what}: {e}"),
        };
        let channel: u8 = fields[0].parse().map_err(|e| parse_err("channel", e))?;
        let macrotime: u64 = fields[1].parse().map_err(|e| parse_err("macrotime", e))?;
        let microtime: u16 = fields[2].parse().map_err(|e| parse_err("microtime", e))?;
        if channel == MARKER_CHANNEL {
            continue;
        }
        records.push(PhotonRecord {
            channel,
            macrotime,
            microtime,
        });
    }

    let mut header = template;
    header.origin = Origin::Imported;
    if sort {
        let (mres, ures) = (header.macrotime_resolution, header.microtime_resolution);
        records.sort_by(|a, b| {
            let ta = a.macrotime as f64 * mres + a.microtime as f64 * ures;
            let tb = b.macrotime as f64 * mres + b.microtime as f64 * ures;
            ta.total_cmp(&tb).then(a.channel.cmp(&b.channel))
        });
    }
    PhotonStream::new(header, records)
}
