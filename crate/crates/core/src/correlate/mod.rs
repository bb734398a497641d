//! Intensity correlation analysis.
//!
//! Two correlators cover the two time regimes of a pulsed experiment. The
//! pulsed correlator histograms signed delays between two channels at fixed
//! resolution over a handful of sync periods; peak areas around zero delay
//! and around the side peaks give the single-photon purity g2(0). The
//! long-delay correlator (see [`correlate_long_delay`]) uses logarithmic
//! bins out to seconds to expose blinking dynamics.

mod longdelay;

pub use longdelay::{correlate_long_delay, fit_flicker};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream::PhotonStream;

#[derive(Debug, Error)]
pub enum CorrelateError {
    #[error("channel {channel} does not exist in this stream")]
    UnknownChannel { channel: u8 },
    #[error("invalid binning: {reason}")]
    InvalidBin { reason: String },
    #[error("span {span} s is shorter than {required} s (ten sync periods)")]
    SpanTooShort { span: f64, required: f64 },
    #[error("stream of {duration} s is shorter than {required} s (ten times the longest delay)")]
    DurationTooShort { duration: f64, required: f64 },
    #[error("too few coincidences to analyze")]
    InsufficientCounts,
    #[error("fewer than four inter-peak gaps; cannot estimate the background plateau")]
    NoPlateau,
    #[error("histogram mode {found:?} does not suit this operation, expected {expected:?}")]
    ModeMismatch {
        expected: CorrelationMode,
        found: CorrelationMode,
    },
    #[error("delay axis spans less than a factor {required} ; cannot constrain the fit")]
    InsufficientRange { required: f64 },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Which correlator produced a histogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrelationMode {
    /// Linear signed-delay histogram over a few sync periods.
    Pulsed,
    /// Logarithmic positive-delay histogram out to long times.
    LongDelay,
}

/// Background correction applied when extracting g2(0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CorrectionMode {
    /// No correction; corrected value equals the raw ratio.
    None,
    /// Subtract the flat coincidence plateau from every peak area.
    #[default]
    Plateau,
    /// Subtract amplitudes: corrected area is `(sqrt(A) - sqrt(B))^2`.
    Amplitude,
}

/// A delay histogram with its accidental-coincidence normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationHistogram {
    pub mode: CorrelationMode,
    /// Bin centers in seconds (signed for pulsed mode).
    pub tau: Vec<f64>,
    /// Coincidence counts per bin.
    pub counts: Vec<u64>,
    /// Expected counts per bin for uncorrelated streams.
    pub normalization: Vec<f64>,
    /// Normalized correlation, counts / normalization.
    pub g2: Vec<f64>,
    /// Bin widths in seconds.
    pub bin_width: Vec<f64>,
    /// Sync period of the source stream, seconds.
    pub period: f64,
}

impl CorrelationHistogram {
    /// Writes the histogram as CSV with columns tau_s, counts,
    /// normalization, g2.
    pub fn write_csv<P: AsRef<std::path::Path>>(&self, path: P) -> Result<(), CorrelateError> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "tau_s,counts,normalization,g2")?;
        for i in 0..self.tau.len() {
            writeln!(
                f,
                "{:.12e},{},{:.6e},{:.6e}",
                self.tau[i], self.counts[i], self.normalization[i], self.g2[i]
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Single-photon purity extracted from a pulsed histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurityResult {
    /// Central peak area over the mean side-peak area, uncorrected.
    pub g2_raw: f64,
    /// Same ratio after background correction.
    pub g2_corrected: f64,
    /// Approximate 1-sigma uncertainty on the corrected value.
    pub uncertainty: f64,
    pub mode: CorrectionMode,
    pub central_area: f64,
    pub side_area_mean: f64,
    pub side_peak_count: usize,
    /// Estimated flat background coincidences per bin.
    pub plateau_per_bin: f64,
    /// Decay constant of the folded side peak, seconds.
    pub peak_time_constant: f64,
    /// Half-width of the integration window around each peak, seconds.
    pub window_half_width: f64,
}

fn validate_channels(stream: &PhotonStream, a: u8, b: u8) -> Result<(), CorrelateError> {
    for ch in [a, b] {
        if ch as u16 >= stream.header.channel_count {
            return Err(CorrelateError::UnknownChannel { channel: ch });
        }
    }
    Ok(())
}

fn pulsed_axis(
    stream: &PhotonStream,
    bin_width: f64,
    span: f64,
) -> Result<(usize, i64), CorrelateError> {
    if !(bin_width.is_finite() && bin_width > 0.0) {
        return Err(CorrelateError::InvalidBin {
            reason: "bin width must be positive".to_string(),
        });
    }
    let period = stream.header.sync_period();
    if bin_width > period / 4.0 {
        return Err(CorrelateError::InvalidBin {
            reason: "bin width must resolve the sync period".to_string(),
        });
    }
    let required = 10.0 * period;
    if !(span.is_finite()) || span < required * (1.0 - 1e-12) {
        return Err(CorrelateError::SpanTooShort { span, required });
    }
    let k_max = (span / bin_width).floor() as i64;
    let n_bins = (2 * k_max + 1) as usize;
    if n_bins > 50_000_000 {
        return Err(CorrelateError::InvalidBin {
            reason: "too many bins; widen bin_width or shrink span".to_string(),
        });
    }
    Ok((n_bins, k_max))
}

/// Histograms signed delays `t_b - t_a` between two channels with uniform
/// bins of `bin_width` seconds centered on multiples of the bin width, out
/// to `|tau| <= span`. The span must cover at least ten sync periods.
pub fn correlate_pulsed(
    stream: &PhotonStream,
    channel_a: u8,
    channel_b: u8,
    bin_width: f64,
    span: f64,
) -> Result<CorrelationHistogram, CorrelateError> {
    validate_channels(stream, channel_a, channel_b)?;
    let (n_bins, k_max) = pulsed_axis(stream, bin_width, span)?;
    let ta = stream.channel_times(channel_a);
    let tb = stream.channel_times(channel_b);
    let same = channel_a == channel_b;
    let reach = span + bin_width / 2.0;

    let chunk = 64 * 1024;
    let counts = (0..ta.len().div_ceil(chunk))
        .into_par_iter()
        .map(|ci| {
            let lo_i = ci * chunk;
            let hi_i = (lo_i + chunk).min(ta.len());
            let mut counts = vec![0u64; n_bins];
            let mut j0 = tb.partition_point(|&t| t < ta[lo_i] - reach);
            for (i, &t) in ta[lo_i..hi_i].iter().enumerate() {
                let i = lo_i + i;
                while j0 < tb.len() && tb[j0] < t - reach {
                    j0 += 1;
                }
                let mut j = j0;
                while j < tb.len() && tb[j] <= t + reach {
                    if !(same && j == i) {
                        let k = ((tb[j] - t) / bin_width).round() as i64;
                        if k.abs() <= k_max {
                            counts[(k + k_max) as usize] += 1;
                        }
                    }
                    j += 1;
                }
            }
            counts
        })
        .reduce(
            || vec![0u64; n_bins],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );

    Ok(finish_pulsed(
        stream.header.sync_period(),
        bin_width,
        k_max,
        counts,
    ))
}

/// Reference implementation of [`correlate_pulsed`]: every photon pair is
/// visited explicitly. Intended for validation on small streams.
pub fn correlate_brute_force(
    stream: &PhotonStream,
    channel_a: u8,
    channel_b: u8,
    bin_width: f64,
    span: f64,
) -> Result<CorrelationHistogram, CorrelateError> {
    validate_channels(stream, channel_a, channel_b)?;
    let (n_bins, k_max) = pulsed_axis(stream, bin_width, span)?;
    let ta = stream.channel_times(channel_a);
    let tb = stream.channel_times(channel_b);
    let same = channel_a == channel_b;

    let mut counts = vec![0u64; n_bins];
    for (i, &t0) in ta.iter().enumerate() {
        for (j, &t1) in tb.iter().enumerate() {
            if same && i == j {
                continue;
            }
            let k = ((t1 - t0) / bin_width).round() as i64;
            if k.abs() <= k_max {
                counts[(k + k_max) as usize] += 1;
            }
        }
    }
    Ok(finish_pulsed(
        stream.header.sync_period(),
        bin_width,
        k_max,
        counts,
    ))
}

fn finish_pulsed(
    period: f64,
    bin_width: f64,
    k_max: i64,
    counts: Vec<u64>,
) -> CorrelationHistogram {
    let n_bins = counts.len();
    let tau: Vec<f64> = (0..n_bins)
        .map(|i| (i as i64 - k_max) as f64 * bin_width)
        .collect();
    let mut hist = CorrelationHistogram {
        mode: CorrelationMode::Pulsed,
        tau,
        counts,
        normalization: vec![0.0; n_bins],
        g2: vec![0.0; n_bins],
        bin_width: vec![bin_width; n_bins],
        period,
    };
    // Normalize so a side-peak window integrates to about one period of
    // flat unit correlation: the per-bin reference level is the mean side
    // area spread over one period's worth of bins.
    if let Ok(w) = peak_windows(&hist) {
        let side_mean = w.side_mean(&hist);
        if side_mean > 0.0 {
            let per_bin = side_mean * bin_width / period;
            for i in 0..n_bins {
                hist.normalization[i] = per_bin;
                hist.g2[i] = hist.counts[i] as f64 / per_bin;
            }
        }
    }
    hist
}

/// Peak window geometry shared by normalization and purity extraction.
struct PeakWindows {
    /// Bin index of the zero-delay center.
    center: usize,
    /// Window half-width in bins.
    half_bins: usize,
    /// Centers of fully contained side-peak windows, as bin indices.
    side_centers: Vec<usize>,
    /// Folded side-peak decay constant, seconds.
    tau_hat: f64,
}

impl PeakWindows {
    fn area(&self, hist: &CorrelationHistogram, center: usize) -> f64 {
        let lo = center - self.half_bins;
        let hi = center + self.half_bins;
        hist.counts[lo..=hi].iter().map(|&c| c as f64).sum()
    }

    fn side_mean(&self, hist: &CorrelationHistogram) -> f64 {
        if self.side_centers.is_empty() {
            return 0.0;
        }
        self.side_centers
            .iter()
            .map(|&c| self.area(hist, c))
            .sum::<f64>()
            / self.side_centers.len() as f64
    }

    fn window_bins(&self) -> f64 {
        (2 * self.half_bins + 1) as f64
    }
}

fn peak_windows(hist: &CorrelationHistogram) -> Result<PeakWindows, CorrelateError> {
    if hist.mode != CorrelationMode::Pulsed {
        return Err(CorrelateError::ModeMismatch {
            expected: CorrelationMode::Pulsed,
            found: hist.mode,
        });
    }
    let n = hist.counts.len();
    let w = hist.bin_width[0];
    let center = n / 2;
    let bins_per_period = hist.period / w;
    let fold_reach = ((bins_per_period / 2.0).floor() as usize)
        .saturating_sub(1)
        .max(1);

    // Average all side peaks into one profile to estimate the peak width.
    let mut profile = vec![0.0f64; 2 * fold_reach + 1];
    let mut n_folded = 0usize;
    for dir in [-1i64, 1] {
        for j in 1.. {
            let c = center as i64 + dir * ((j as f64 * bins_per_period).round() as i64);
            let (lo, hi) = (c - fold_reach as i64, c + fold_reach as i64);
            if lo < 0 || hi >= n as i64 {
                break;
            }
            for d in 0..profile.len() {
                profile[d] += hist.counts[(lo + d as i64) as usize] as f64;
            }
            n_folded += 1;
        }
    }
    let tau_hat = if n_folded == 0 {
        w
    } else {
        half_width_to_tau(&profile, w)
    };

    let cap = fold_reach;
    let half_bins = ((5.0 * (tau_hat / w).max(1.0)).round() as usize).clamp(5, cap.max(5));
    let half_bins = half_bins.min(cap.max(1)).min(center);

    let mut side_centers = Vec::new();
    for dir in [-1i64, 1] {
        for j in 1.. {
            let c = center as i64 + dir * ((j as f64 * bins_per_period).round() as i64);
            if c - (half_bins as i64) < 0 || c + (half_bins as i64) >= n as i64 {
                break;
            }
            side_centers.push(c as usize);
        }
    }
    side_centers.sort_unstable();
    Ok(PeakWindows {
        center,
        half_bins,
        side_centers,
        tau_hat,
    })
}

/// Estimates the decay constant of a folded peak profile from its half
/// width at half maximum, assuming a two-sided exponential shape.
fn half_width_to_tau(profile: &[f64], bin_width: f64) -> f64 {
    let n = profile.len();
    let (dm, &max) = profile
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let floor = profile.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max > floor) {
        return bin_width;
    }
    let half = floor + (max - floor) / 2.0;
    let mut hwhm_bins = (n - 1 - dm) as f64;
    for r in dm + 1..n {
        if profile[r] < half {
            let frac = (profile[r - 1] - half) / (profile[r - 1] - profile[r]);
            hwhm_bins = (r - 1 - dm) as f64 + frac;
            break;
        }
    }
    (hwhm_bins.max(0.25) / std::f64::consts::LN_2) * bin_width
}

/// Extracts g2(0) from a pulsed histogram as the central peak area over the
/// mean side-peak area, with the chosen background correction. The flat
/// coincidence plateau is estimated from the central halves of the gaps
/// between peak windows; at least four gaps are required.
pub fn subtract_background(
    hist: &CorrelationHistogram,
    mode: CorrectionMode,
) -> Result<PurityResult, CorrelateError> {
    let windows = peak_windows(hist)?;
    if windows.side_centers.len() < 2 {
        return Err(CorrelateError::InsufficientCounts);
    }
    let central_area = windows.area(hist, windows.center);
    let side_mean = windows.side_mean(hist);
    if side_mean <= 0.0 {
        return Err(CorrelateError::InsufficientCounts);
    }

    // Plateau bins: central 50% of each gap between adjacent windows.
    let mut all_centers = windows.side_centers.clone();
    let insert_at = all_centers.partition_point(|&c| c < windows.center);
    all_centers.insert(insert_at, windows.center);
    let mut plateau_sum = 0.0f64;
    let mut plateau_bins = 0usize;
    let mut gaps = 0usize;
    for pair in all_centers.windows(2) {
        let gap_lo = pair[0] + windows.half_bins + 1;
        let gap_hi = pair[1] - windows.half_bins; // exclusive
        if gap_hi <= gap_lo {
            continue;
        }
        let len = gap_hi - gap_lo;
        let trim = len / 4;
        let (lo, hi) = (gap_lo + trim, gap_hi - trim);
        if hi <= lo {
            continue;
        }
        gaps += 1;
        for i in lo..hi {
            plateau_sum += hist.counts[i] as f64;
            plateau_bins += 1;
        }
    }
    if gaps < 4 || plateau_bins == 0 {
        return Err(CorrelateError::NoPlateau);
    }
    let plateau_per_bin = plateau_sum / plateau_bins as f64;
    let bg_per_window = plateau_per_bin * windows.window_bins();

    let g2_raw = central_area / side_mean;
    let (central_c, side_c) = match mode {
        CorrectionMode::None => (central_area, side_mean),
        CorrectionMode::Plateau => (central_area - bg_per_window, side_mean - bg_per_window),
        CorrectionMode::Amplitude => (
            (central_area.max(0.0).sqrt() - bg_per_window.sqrt()).powi(2),
            (side_mean.max(0.0).sqrt() - bg_per_window.sqrt()).powi(2),
        ),
    };
    if side_c <= 0.0 {
        return Err(CorrelateError::InsufficientCounts);
    }
    let g2_corrected = central_c / side_c;

    // Poisson propagation on the raw areas, scaled onto the corrected ratio.
    let n_side = windows.side_centers.len() as f64;
    let rel_central = central_area.max(1.0).sqrt() / central_c.abs().max(1e-12);
    let rel_side = (side_mean.max(1.0) / n_side).sqrt() / side_c;
    let uncertainty =
        g2_corrected.abs().max(1e-12) * (rel_central * rel_central + rel_side * rel_side).sqrt();

    Ok(PurityResult {
        g2_raw,
        g2_corrected,
        uncertainty,
        mode,
        central_area,
        side_area_mean: side_mean,
        side_peak_count: windows.side_centers.len(),
        plateau_per_bin,
        peak_time_constant: windows.tau_hat,
        window_half_width: windows.half_bins as f64 * hist.bin_width[0],
    })
}
