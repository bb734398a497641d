//! Time-binned trace analysis.
//!
//! Streams are reduced to per-bin photon counts and per-bin mean arrival
//! times, blinking states are segmented from the count histogram, and the
//! state-resolved decay histograms are fitted by Poisson maximum likelihood.
//! Saturation and spectrum curve fits live here too since they share the
//! fitting machinery.

pub mod curves;
pub mod decay;
pub mod segment;

pub use curves::{fit_saturation, fit_spectrum, SpectrumFit};
pub use decay::{decay_histogram, fit_decay, DecayHistogram, DecayModel, DecaySelection};
pub use segment::{segment_states, StateLabel, StateSegmentation};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::stream::PhotonStream;

/// Errors from trace binning, segmentation, and the associated fits.
#[derive(Debug, Error)]
pub enum TraceError {
    #[error("intensity histogram is unimodal; no state separation")]
    Unimodal,
    #[error("trace too short for segmentation: {found} bins < {required}")]
    TooFewBins { required: usize, found: usize },
    #[error("selection matches no photons")]
    EmptySelection,
    #[error("histogram has too few counts: {found} < {required}")]
    InsufficientCounts { required: u64, found: u64 },
    #[error("too few points: {found} < {required}")]
    InsufficientPoints { required: usize, found: usize },
    #[error("series lengths differ: {left} vs {right}")]
    MismatchedSeries { left: usize, right: usize },
    #[error("no dominant spectral peak")]
    NoPeak,
    #[error("fit diverged")]
    FitDiverged,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Photon counts per fixed-width time bin, both channels summed.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityTrace {
    /// Bin width in seconds.
    pub bin_time: f64,
    /// Absolute time of the first bin's left edge, seconds.
    pub start_time: f64,
    /// Photon counts per half-open bin.
    pub counts: Vec<u64>,
}

impl IntensityTrace {
    /// Number of bins.
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    /// True when the trace has no bins.
    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Center time of bin `i`, seconds.
    pub fn bin_center(&self, i: usize) -> f64 {
        self.start_time + (i as f64 + 0.5) * self.bin_time
    }

    /// Writes the trace as `time_s,counts` CSV.
    pub fn write_csv(&self, path: &Path) -> Result<(), TraceError> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "time_s,counts")?;
        for (i, &c) in self.counts.iter().enumerate() {
            writeln!(out, "{:.9e},{}", self.bin_center(i), c)?;
        }
        Ok(())
    }
}

/// Per-bin mean (or median) photon arrival time relative to the sync pulse.
/// Bins without photons carry `None` rather than a fabricated zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LifetimeTrace {
    /// Bin width in seconds.
    pub bin_time: f64,
    /// Absolute time of the first bin's left edge, seconds.
    pub start_time: f64,
    /// Sync period, the upper bound for every defined entry.
    pub period: f64,
    /// Mean arrival time per bin, seconds; `None` for empty bins.
    pub mean_arrival: Vec<Option<f64>>,
}

impl LifetimeTrace {
    /// Number of bins.
    pub fn len(&self) -> usize {
        self.mean_arrival.len()
    }

    /// True when the trace has no bins.
    pub fn is_empty(&self) -> bool {
        self.mean_arrival.is_empty()
    }

    /// Writes the trace as `time_s,arrival_s` CSV; empty bins print `nan`.
    pub fn write_csv(&self, path: &Path) -> Result<(), TraceError> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "time_s,arrival_s")?;
        for (i, value) in self.mean_arrival.iter().enumerate() {
            let t = self.start_time + (i as f64 + 0.5) * self.bin_time;
            match value {
                Some(v) => writeln!(out, "{:.9e},{:.9e}", t, v)?,
                None => writeln!(out, "{:.9e},nan", t)?,
            }
        }
        Ok(())
    }
}

/// Per-bin arrival statistic for [`arrival_trace`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrivalStatistic {
    Mean,
    Median,
}

/// Number of bins covering the stream: whole bins over the duration, with
/// at least one so short streams still conserve counts.
fn bin_count(stream: &PhotonStream, bin_time: f64) -> usize {
    ((stream.header.duration / bin_time).floor() as usize).max(1)
}

/// Bin index of an absolute time; the fractional tail beyond the last whole
/// bin folds into the final bin so no photon is dropped.
pub(crate) fn bin_index(t: f64, bin_time: f64, n_bins: usize) -> usize {
    ((t / bin_time).floor() as usize).min(n_bins - 1)
}

/// Counts photons per `bin_time` bin, both channels summed.
///
/// Panics if `bin_time` is not positive.
pub fn bin_intensity(stream: &PhotonStream, bin_time: f64) -> IntensityTrace {
    assert!(bin_time > 0.0, "bin_time must be positive");
    let n_bins = bin_count(stream, bin_time);
    let mut counts = vec![0u64; n_bins];
    for rec in &stream.records {
        counts[bin_index(stream.abs_time(rec), bin_time, n_bins)] += 1;
    }
    IntensityTrace {
        bin_time,
        start_time: 0.0,
        counts,
    }
}

/// Per-bin arrival-time trace with a selectable statistic.
///
/// Panics if `bin_time` is not positive.
pub fn arrival_trace(
    stream: &PhotonStream,
    bin_time: f64,
    statistic: ArrivalStatistic,
) -> LifetimeTrace {
    assert!(bin_time > 0.0, "bin_time must be positive");
    let n_bins = bin_count(stream, bin_time);
    let res = stream.header.microtime_resolution;
    let mut per_bin: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
    for rec in &stream.records {
        let idx = bin_index(stream.abs_time(rec), bin_time, n_bins);
        per_bin[idx].push(rec.microtime as f64 * res);
    }
    let mean_arrival = per_bin
        .into_iter()
        .map(|mut v| {
            if v.is_empty() {
                return None;
            }
            Some(match statistic {
                ArrivalStatistic::Mean => v.iter().sum::<f64>() / v.len() as f64,
                ArrivalStatistic::Median => {
                    v.sort_by(f64::total_cmp);
                    let m = v.len() / 2;
                    if v.len() % 2 == 1 {
                        v[m]
                    } else {
                        0.5 * (v[m - 1] + v[m])
                    }
                }
            })
        })
        .collect();
    LifetimeTrace {
        bin_time,
        start_time: 0.0,
        period: stream.header.sync_period(),
        mean_arrival,
    }
}

/// Mean arrival time per bin; the conventional lifetime proxy.
pub fn mean_arrival_trace(stream: &PhotonStream, bin_time: f64) -> LifetimeTrace {
    arrival_trace(stream, bin_time, ArrivalStatistic::Mean)
}
