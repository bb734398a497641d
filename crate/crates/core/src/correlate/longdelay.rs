//! Long-delay correlation on logarithmic bins.
//!
//! Delays span `tau_min` to `tau_max` with a fixed number of bins per
//! decade. Bin edges at half a sync period or more are snapped to whole
//! multiples of the period so each bin integrates complete pulse combs,
//! which keeps the analytic accidental normalization exact for pulsed
//! sources. Short-delay bins count exact photon pair times; wide bins
//! switch to a coarse time grid with per-tick weights (classic multi-tau),
//! which is enabled only where the grid error is far below counting noise.

use rayon::prelude::*;

use crate::fit::{least_squares, FitParameter, FitResult};
use crate::stream::PhotonStream;

use super::{CorrelateError, CorrelationHistogram, CorrelationMode};

/// Quantized counting is only allowed when the tick is at most this
/// fraction of the bin's lower edge.
const TICK_DIVISOR: f64 = 64.0;
/// ... and when at least this many accidental counts are expected, so the
/// residual grid error stays below the Poisson noise.
const MIN_EXPECTED_FOR_MERGE: f64 = 1e4;

#[derive(Debug, Clone, Copy)]
struct BinSpec {
    lo: f64,
    hi: f64,
    /// 0 counts exact pair times; level `l >= 1` uses ticks of
    /// `tau_min * 2^(l-1)` seconds.
    level: u32,
}

/// Log-spaced edges from `tau_min` to `tau_max`, snapped onto the sync
/// period comb once edges reach half a period.
pub(crate) fn build_edges(
    tau_min: f64,
    tau_max: f64,
    bins_per_decade: usize,
    period: f64,
) -> Vec<f64> {
    let n = ((tau_max / tau_min).log10() * bins_per_decade as f64)
        .ceil()
        .max(1.0) as usize;
    let mut edges: Vec<f64> = (0..=n)
        .map(|i| tau_min * 10f64.powf(i as f64 / bins_per_decade as f64))
        .collect();
    edges[n] = tau_max;
    for e in edges.iter_mut() {
        if *e >= period / 2.0 {
            *e = (*e / period).round() * period;
        }
    }
    edges.dedup_by(|later, kept| *later <= *kept * (1.0 + 1e-12));
    edges
}

fn expected_pairs(n_a: f64, n_b: f64, same: bool, lo: f64, hi: f64, duration: f64) -> f64 {
    let geometry = (hi - lo) * duration - (hi * hi - lo * lo) / 2.0;
    let pair_product = if same {
        n_a * (n_a - 1.0)
    } else {
        2.0 * n_a * n_b
    };
    pair_product * geometry / (duration * duration)
}

/// Correlates two channels over logarithmic delays covering
/// `[tau_min, tau_max]`. Both orderings contribute, so the histogram is an
/// absolute-delay correlation; `g2` is counts over the analytic accidental
/// level. The stream must last at least ten times `tau_max`.
pub fn correlate_long_delay(
    stream: &PhotonStream,
    channel_a: u8,
    channel_b: u8,
    tau_min: f64,
    tau_max: f64,
    bins_per_decade: usize,
) -> Result<CorrelationHistogram, CorrelateError> {
    correlate_long_delay_impl(
        stream,
        channel_a,
        channel_b,
        tau_min,
        tau_max,
        bins_per_decade,
        false,
    )
}

pub(crate) fn correlate_long_delay_impl(
    stream: &PhotonStream,
    channel_a: u8,
    channel_b: u8,
    tau_min: f64,
    tau_max: f64,
    bins_per_decade: usize,
    force_exact: bool,
) -> Result<CorrelationHistogram, CorrelateError> {
    super::validate_channels(stream, channel_a, channel_b)?;
    if !(tau_min.is_finite() && tau_min > 0.0 && tau_max.is_finite() && tau_max > tau_min) {
        return Err(CorrelateError::InvalidBin {
            reason: "need 0 < tau_min < tau_max".to_string(),
        });
    }
    if bins_per_decade == 0 || bins_per_decade > 1000 {
        return Err(CorrelateError::InvalidBin {
            reason: "bins_per_decade must lie in 1..=1000".to_string(),
        });
    }
    let duration = stream.header.duration;
    let required = 10.0 * tau_max;
    if duration < required * (1.0 - 1e-12) {
        return Err(CorrelateError::DurationTooShort { duration, required });
    }

    let period = stream.header.sync_period();
    let edges = build_edges(tau_min, tau_max, bins_per_decade, period);
    if edges.len() < 2 {
        return Err(CorrelateError::InvalidBin {
            reason: "delay axis collapsed to zero bins".to_string(),
        });
    }

    let ta = stream.channel_times(channel_a);
    let tb = stream.channel_times(channel_b);
    let same = channel_a == channel_b;
    let (n_a, n_b) = (ta.len() as f64, tb.len() as f64);

    let mut bins: Vec<BinSpec> = edges
        .windows(2)
        .map(|e| BinSpec {
            lo: e[0],
            hi: e[1],
            level: 0,
        })
        .collect();
    if !force_exact {
        for b in bins.iter_mut() {
            let expected = expected_pairs(n_a, n_b, same, b.lo, b.hi, duration);
            if expected < MIN_EXPECTED_FOR_MERGE {
                continue;
            }
            // Largest tick obeying both the lower-edge and the bin-width
            // constraint; level 0 when even the finest tick is too coarse.
            let cap = (b.lo / TICK_DIVISOR).min((b.hi - b.lo) / 8.0);
            if cap < tau_min {
                continue;
            }
            b.level = (cap / tau_min).log2().floor() as u32 + 1;
        }
    }

    let mut counts = vec![0u64; bins.len()];
    let mut start = 0;
    while start < bins.len() {
        let mut end = start + 1;
        while end < bins.len() && bins[end].level == bins[start].level {
            end += 1;
        }
        let out = &mut counts[start..end];
        if bins[start].level == 0 {
            let run = &bins[start..end];
            count_exact(&ta, &tb, run, out);
            if !same {
                count_exact(&tb, &ta, run, out);
            }
        } else {
            let tick = tau_min * 2f64.powi(bins[start].level as i32 - 1);
            // Tick-difference boundaries; shared bin edges give identical
            // boundaries, so bins within a run stay disjoint and gap-free.
            let d_bounds: Vec<u64> = bins[start..end]
                .iter()
                .map(|b| b.lo)
                .chain(std::iter::once(bins[end - 1].hi))
                .map(|e| (e / tick - 1e-9).ceil().max(0.0) as u64)
                .collect();
            // A quantized bin truly covers [d_lo, d_hi) ticks, which can
            // shift off the requested edges by up to one tick. Report and
            // normalize against the window actually counted, which keeps
            // the estimate unbiased at level seams.
            for (b, d) in bins[start..end].iter_mut().zip(d_bounds.windows(2)) {
                b.lo = d[0] as f64 * tick;
                b.hi = d[1] as f64 * tick;
            }
            let qa = collapse(&ta, tick);
            let qb = if same {
                qa.clone()
            } else {
                collapse(&tb, tick)
            };
            count_quantized(&qa, &qb, &d_bounds, out);
            if !same {
                count_quantized(&qb, &qa, &d_bounds, out);
            }
        }
        start = end;
    }

    let tau: Vec<f64> = bins.iter().map(|b| (b.lo * b.hi).sqrt()).collect();
    let bin_width: Vec<f64> = bins.iter().map(|b| b.hi - b.lo).collect();
    let normalization: Vec<f64> = bins
        .iter()
        .map(|b| expected_pairs(n_a, n_b, same, b.lo, b.hi, duration))
        .collect();
    let g2 = counts
        .iter()
        .zip(&normalization)
        .map(|(&c, &n)| if n > 0.0 { c as f64 / n } else { 0.0 })
        .collect();
    Ok(CorrelationHistogram {
        mode: CorrelationMode::LongDelay,
        tau,
        counts,
        normalization,
        g2,
        bin_width,
        period,
    })
}

/// Counts pairs with `t_dst - t_src` in the run's bins using exact times.
/// Only forward pairs are visited, so a same-channel call counts each
/// unordered pair once; cross-channel callers sweep both orders.
fn count_exact(src: &[f64], dst: &[f64], run: &[BinSpec], out: &mut [u64]) {
    let lo_all = run[0].lo;
    let hi_all = run[run.len() - 1].hi;
    let uppers: Vec<f64> = run.iter().map(|b| b.hi).collect();

    let chunk = 64 * 1024;
    let partial = (0..src.len().div_ceil(chunk))
        .into_par_iter()
        .map(|ci| {
            let lo_i = ci * chunk;
            let hi_i = (lo_i + chunk).min(src.len());
            let mut acc = vec![0u64; run.len()];
            let mut j0 = dst.partition_point(|&t| t < src[lo_i] + lo_all);
            for &t in &src[lo_i..hi_i] {
                let floor = t + lo_all;
                while j0 < dst.len() && dst[j0] < floor {
                    j0 += 1;
                }
                let ceil = t + hi_all;
                let mut j = j0;
                while j < dst.len() && dst[j] < ceil {
                    let tau = dst[j] - t;
                    if tau >= lo_all && tau < hi_all {
                        let idx = uppers.partition_point(|&u| u <= tau);
                        if idx < run.len() {
                            acc[idx] += 1;
                        }
                    }
                    j += 1;
                }
            }
            acc
        })
        .reduce(
            || vec![0u64; run.len()],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
    for (o, p) in out.iter_mut().zip(partial) {
        *o += p;
    }
}

/// Collapses sorted times onto a tick grid as (tick, multiplicity) pairs.
fn collapse(times: &[f64], tick: f64) -> Vec<(u64, u64)> {
    let mut out: Vec<(u64, u64)> = Vec::new();
    for &t in times {
        let q = (t / tick) as u64;
        match out.last_mut() {
            Some(last) if last.0 == q => last.1 += 1,
            _ => out.push((q, 1)),
        }
    }
    out
}

/// Counts tick-difference pairs `q_dst - q_src` falling in the bins bounded
/// by `d_bounds`, weighting by the product of tick multiplicities.
fn count_quantized(src: &[(u64, u64)], dst: &[(u64, u64)], d_bounds: &[u64], out: &mut [u64]) {
    let nbins = d_bounds.len() - 1;
    let d_first = d_bounds[0];
    let d_last = d_bounds[nbins];

    let chunk = 16 * 1024;
    let partial = (0..src.len().div_ceil(chunk))
        .into_par_iter()
        .map(|ci| {
            let lo_i = ci * chunk;
            let hi_i = (lo_i + chunk).min(src.len());
            let mut acc = vec![0u64; nbins];
            let mut j0 = dst.partition_point(|&(q, _)| q < src[lo_i].0 + d_first);
            for &(q, w) in &src[lo_i..hi_i] {
                let floor = q + d_first;
                while j0 < dst.len() && dst[j0].0 < floor {
                    j0 += 1;
                }
                let ceil = q + d_last;
                let mut j = j0;
                while j < dst.len() && dst[j].0 < ceil {
                    let d = dst[j].0 - q;
                    let idx = d_bounds[1..].partition_point(|&u| u <= d);
                    if idx < nbins {
                        acc[idx] += w * dst[j].1;
                    }
                    j += 1;
                }
            }
            acc
        })
        .reduce(
            || vec![0u64; nbins],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
    for (o, p) in out.iter_mut().zip(partial) {
        *o += p;
    }
}

/// Lower bin edge from a geometric-mean center and the bin width.
fn lower_edge(tau: f64, width: f64) -> f64 {
    (-width + (width * width + 4.0 * tau * tau).sqrt()) / 2.0
}

/// Fits `g2(tau) = baseline + amplitude * exp(-tau / flicker_time)` to a
/// long-delay histogram. Bins starting below one sync period are skipped
/// because they still resolve the pulse comb. The remaining delay axis must
/// span at least one decade.
pub fn fit_flicker(hist: &CorrelationHistogram) -> Result<FitResult, CorrelateError> {
    if hist.mode != CorrelationMode::LongDelay {
        return Err(CorrelateError::ModeMismatch {
            expected: CorrelationMode::LongDelay,
            found: hist.mode,
        });
    }
    let mut tau = Vec::new();
    let mut g2 = Vec::new();
    let mut weights = Vec::new();
    for i in 0..hist.tau.len() {
        let lo = lower_edge(hist.tau[i], hist.bin_width[i]);
        if lo < hist.period * 0.999 || hist.normalization[i] <= 0.0 {
            continue;
        }
        tau.push(hist.tau[i]);
        g2.push(hist.counts[i] as f64 / hist.normalization[i]);
        let sigma2 =
            (hist.counts[i] as f64).max(1.0) / (hist.normalization[i] * hist.normalization[i]);
        weights.push(1.0 / sigma2);
    }
    if tau.len() < 8 || tau[tau.len() - 1] / tau[0] < 10.0 {
        return Err(CorrelateError::InsufficientRange { required: 10.0 });
    }

    let tail = g2.len() - (g2.len() / 4).max(1);
    let baseline0 = g2[tail..].iter().sum::<f64>() / (g2.len() - tail) as f64;
    let amp0 = (g2[0] - baseline0).max(1e-3);
    let threshold = baseline0 + amp0 / std::f64::consts::E;
    let tau0 = tau
        .iter()
        .zip(&g2)
        .find(|(_, &g)| g < threshold)
        .map(|(&t, _)| t)
        .unwrap_or((tau[0] * tau[tau.len() - 1]).sqrt());

    let model = |p: &[f64], x: f64| p[0] + p[1] * (-x / p[2].clamp(-700.0, 700.0).exp()).exp();
    let fit = least_squares(model, &tau, &g2, &weights, &[baseline0, amp0, tau0.ln()]);
    let flicker_time = fit.params[2].clamp(-700.0, 700.0).exp();

    let mut warnings = Vec::new();
    if flicker_time < 2.0 * tau[0] || flicker_time > tau[tau.len() - 1] / 2.0 {
        warnings.push(
            "flicker_time sits near the edge of the delay axis and is poorly constrained"
                .to_string(),
        );
    }
    if fit.params[1] <= 0.0 {
        warnings.push("no positive flicker contrast detected".to_string());
    }
    if !fit.converged {
        warnings.push("fit did not converge".to_string());
    }

    Ok(FitResult {
        model: "flicker".to_string(),
        parameters: vec![
            FitParameter {
                name: "baseline".to_string(),
                value: fit.params[0],
                uncertainty: fit.uncertainties[0],
            },
            FitParameter {
                name: "amplitude".to_string(),
                value: fit.params[1],
                uncertainty: fit.uncertainties[1],
            },
            FitParameter {
                name: "flicker_time".to_string(),
                value: flicker_time,
                uncertainty: flicker_time * fit.uncertainties[2],
            },
        ],
        residual_norm: fit.residual_norm,
        converged: fit.converged,
        iterations: fit.iterations,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{EmitterModel, SimulationConfig};
    use crate::stream::{Origin, PhotonRecord, PhotonStream, StreamHeader};

    #[test]
    fn edges_snap_onto_the_period_comb() {
        let period = 4e-7;
        let edges = build_edges(1e-8, 1e-3, 10, period);
        for pair in edges.windows(2) {
            assert!(pair[1] > pair[0]);
        }
        for &e in &edges {
            if e >= period / 2.0 {
                let k = (e / period).round();
                assert!(
                    (e - k * period).abs() < 1e-9 * period,
                    "edge {e} is off the comb"
                );
            }
        }
        assert!((edges[0] - 1e-8).abs() < 1e-20);
        assert!((edges.last().unwrap() - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn hand_counted_pairs_and_normalization() {
        // Channel 0 at 1 s and 2 s, channel 1 at 1.5 s; both pairs sit at
        // |tau| = 0.5 s.
        let header = StreamHeader {
            version: 1,
            channel_count: 2,
            sync_rate: 1.0,
            microtime_resolution: 1e-3,
            macrotime_resolution: 1.0,
            duration: 10.0,
            record_count: 0,
            origin: Origin::Simulated,
        };
        let stream = PhotonStream::new(
            header,
            vec![
                PhotonRecord {
                    channel: 0,
                    macrotime: 1,
                    microtime: 0,
                },
                PhotonRecord {
                    channel: 1,
                    macrotime: 1,
                    microtime: 500,
                },
                PhotonRecord {
                    channel: 0,
                    macrotime: 2,
                    microtime: 0,
                },
            ],
        )
        .unwrap();
        // One decade at one bin per decade leaves a single [0.1, 1.0) bin.
        let hist = correlate_long_delay(&stream, 0, 1, 0.1, 1.0, 1).unwrap();
        assert_eq!(hist.counts, vec![2]);
        // 2 * N_A * N_B * ((b-a) D - (b^2-a^2)/2) / D^2 with the bin
        // [0.1, 1): 2*2*1*(0.9*10 - 0.495)/100.
        let expected = 4.0 * (9.0 - 0.495) / 100.0;
        assert!((hist.normalization[0] - expected).abs() < 1e-12);
        assert!((hist.g2[0] - 2.0 / expected).abs() < 1e-9);
    }

    fn poisson_pair_config(rate: f64, seed: u64) -> SimulationConfig {
        SimulationConfig {
            model: EmitterModel {
                quantum_yield_bright: 0.0,
                quantum_yield_dim: 0.0,
                biexciton_yield: 0.0,
                rate_charge: 0.0,
                rate_discharge: 0.0,
                ..EmitterModel::default()
            },
            sync_rate: 2.5e6,
            duration: 20.0,
            mean_excitons: 0.1,
            detection_efficiency: 0.0,
            background_rate: rate,
            irf_fwhm: 0.0,
            microtime_resolution: 1e-9,
            channel_count: 2,
            seed,
        }
    }

    #[test]
    fn uncorrelated_streams_sit_at_unit_g2() {
        let stream = crate::sim::simulate(&poisson_pair_config(5e4, 11)).unwrap();
        let hist = correlate_long_delay(&stream, 0, 1, 1e-6, 0.1, 10).unwrap();
        let mut worst: f64 = 0.0;
        let mut mean = 0.0;
        for (i, &g) in hist.g2.iter().enumerate() {
            assert!(hist.normalization[i] > 1e4);
            worst = worst.max((g - 1.0).abs());
            mean += g;
        }
        mean /= hist.g2.len() as f64;
        assert!(worst < 0.06, "worst deviation {worst}");
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn quantized_levels_match_exact_counting() {
        let stream = crate::sim::simulate(&poisson_pair_config(5e3, 12)).unwrap();
        let merged = correlate_long_delay(&stream, 0, 1, 1e-6, 0.1, 10).unwrap();
        let exact = correlate_long_delay_impl(&stream, 0, 1, 1e-6, 0.1, 10, true).unwrap();
        let mut saw_merged_bin = false;
        for i in 0..merged.tau.len() {
            if merged.counts[i] == exact.counts[i] {
                continue;
            }
            saw_merged_bin = true;
            let rel = (merged.g2[i] - exact.g2[i]).abs() / exact.g2[i].max(1e-12);
            assert!(
                rel < 0.02,
                "bin {} at tau {:.3e}: merged {} vs exact {}",
                i,
                merged.tau[i],
                merged.counts[i],
                exact.counts[i]
            );
        }
        assert!(saw_merged_bin, "no bin exercised the quantized path");
    }

    #[test]
    fn autocorrelation_counts_unordered_pairs_once() {
        let stream = crate::sim::simulate(&poisson_pair_config(2e3, 13)).unwrap();
        let hist = correlate_long_delay(&stream, 0, 0, 1e-5, 0.1, 5).unwrap();
        // Poisson autocorrelation is also flat at 1 under the
        // N(N-1)-normalized convention.
        for (i, &g) in hist.g2.iter().enumerate() {
            if hist.normalization[i] > 1e3 {
                assert!((g - 1.0).abs() < 0.15, "bin {i}: {g}");
            }
        }
    }

    #[test]
    fn rejects_short_streams_and_bad_axes() {
        let stream = crate::sim::simulate(&poisson_pair_config(1e3, 14)).unwrap();
        assert!(matches!(
            correlate_long_delay(&stream, 0, 1, 1e-6, 5.0, 10),
            Err(CorrelateError::DurationTooShort { .. })
        ));
        assert!(matches!(
            correlate_long_delay(&stream, 0, 1, 0.0, 0.1, 10),
            Err(CorrelateError::InvalidBin { .. })
        ));
        assert!(matches!(
            correlate_long_delay(&stream, 0, 1, 1e-6, 0.1, 0),
            Err(CorrelateError::InvalidBin { .. })
        ));
    }

    fn synthetic_flicker_hist(amplitude: f64, flicker_time: f64) -> CorrelationHistogram {
        let edges = build_edges(1e-6, 1.0, 5, 1e-9);
        let n = edges.len() - 1;
        let mut hist = CorrelationHistogram {
            mode: CorrelationMode::LongDelay,
            tau: Vec::with_capacity(n),
            counts: Vec::with_capacity(n),
            normalization: vec![1e8; n],
            g2: Vec::with_capacity(n),
            bin_width: Vec::with_capacity(n),
            period: 1e-9,
        };
        for e in edges.windows(2) {
            let tau = (e[0] * e[1]).sqrt();
            let g = 1.0 + amplitude * (-tau / flicker_time).exp();
            let c = (1e8 * g).round() as u64;
            hist.tau.push(tau);
            hist.counts.push(c);
            hist.g2.push(c as f64 / 1e8);
            hist.bin_width.push(e[1] - e[0]);
        }
        hist
    }

    #[test]
    fn flicker_fit_recovers_synthetic_decay() {
        let hist = synthetic_flicker_hist(0.18, 2e-5);
        let fit = fit_flicker(&hist).unwrap();
        assert!(fit.converged);
        assert!((fit.value("baseline") - 1.0).abs() < 1e-3);
        assert!((fit.value("amplitude") - 0.18).abs() < 0.005);
        let tf = fit.value("flicker_time");
        assert!((tf - 2e-5).abs() / 2e-5 < 0.05, "flicker time {tf}");
        assert!(fit.warnings.is_empty(), "{:?}", fit.warnings);
    }

    #[test]
    fn flicker_fit_requires_a_decade_past_the_comb() {
        let mut hist = synthetic_flicker_hist(0.18, 2e-5);
        hist.period = 0.5; // every bin now starts below one period
        assert!(matches!(
            fit_flicker(&hist),
            Err(CorrelateError::InsufficientRange { .. })
        ));
        let pulsed = CorrelationHistogram {
            mode: CorrelationMode::Pulsed,
            ..synthetic_flicker_hist(0.1, 1e-5)
        };
        assert!(matches!(
            fit_flicker(&pulsed),
            Err(CorrelateError::ModeMismatch { .. })
        ));
    }
}
