//! Blinking-state segmentation from the intensity histogram.
//!
//! A two-component Gaussian mixture is fitted to the per-bin counts by
//! expectation maximization. Each component claims the bins inside its
//! mean +/- 2 sigma window; bins between the windows stay excluded so
//! mid-transition bins contaminate neither state.

use super::{IntensityTrace, TraceError};

/// Label of one trace bin after segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateLabel {
    Low,
    High,
    Excluded,
}

/// Two-state segmentation of an intensity trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSegmentation {
    /// Bin width of the segmented trace, seconds.
    pub bin_time: f64,
    /// Upper count bound of the low state (low mean + 2 sigma).
    pub threshold_low: f64,
    /// Lower count bound of the high state (high mean - 2 sigma).
    pub threshold_high: f64,
    /// Fitted mean counts per bin of the low state.
    pub low_mean: f64,
    /// Fitted mean counts per bin of the high state.
    pub high_mean: f64,
    /// Fitted standard deviation of the low state.
    pub low_sigma: f64,
    /// Fitted standard deviation of the high state.
    pub high_sigma: f64,
    /// One label per trace bin.
    pub bin_labels: Vec<StateLabel>,
}

impl StateSegmentation {
    /// Number of bins carrying a label.
    pub fn count(&self, label: StateLabel) -> usize {
        self.bin_labels.iter().filter(|&&l| l == label).count()
    }

    /// Fraction of high-state bins among the definitely labeled ones.
    pub fn high_fraction(&self) -> f64 {
        let high = self.count(StateLabel::High) as f64;
        let low = self.count(StateLabel::Low) as f64;
        high / (high + low)
    }
}

struct Component {
    weight: f64,
    mean: f64,
    sigma: f64,
}

fn normal_pdf(x: f64, mean: f64, sigma: f64) -> f64 {
    let z = (x - mean) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Fits a two-component mixture by EM. Initialization splits the sorted
/// data at the median so the components start on opposite flanks.
fn fit_mixture(data: &[f64]) -> [Component; 2] {
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    let range = sorted[sorted.len() - 1] - sorted[0];
    let sigma_floor = (1e-3 * range).max(1e-6);

    let moments = |v: &[f64]| -> (f64, f64) {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt().max(sigma_floor))
    };
    let half = sorted.len() / 2;
    let (m1, s1) = moments(&sorted[..half.max(1)]);
    let (m2, s2) = moments(&sorted[half.min(sorted.len() - 1)..]);
    let mut comps = [
        Component {
            weight: 0.5,
            mean: m1,
            sigma: s1,
        },
        Component {
            weight: 0.5,
            mean: m2,
            sigma: s2,
        },
    ];

    let n = data.len() as f64;
    let mut last_ll = f64::NEG_INFINITY;
    for _ in 0..500 {
        // E step: per-point responsibilities of component 0.
        let mut resp = vec![0.0f64; data.len()];
        let mut ll = 0.0;
        for (i, &x) in data.iter().enumerate() {
            let p0 = comps[0].weight * normal_pdf(x, comps[0].mean, comps[0].sigma);
            let p1 = comps[1].weight * normal_pdf(x, comps[1].mean, comps[1].sigma);
            let total = (p0 + p1).max(1e-300);
            resp[i] = p0 / total;
            ll += total.ln();
        }
        // M step.
        for (c, comp) in comps.iter_mut().enumerate() {
            let r = |i: usize| if c == 0 { resp[i] } else { 1.0 - resp[i] };
            let weight: f64 = (0..data.len()).map(&r).sum();
            let mean = (0..data.len()).map(|i| r(i) * data[i]).sum::<f64>() / weight.max(1e-12);
            let var = (0..data.len())
                .map(|i| r(i) * (data[i] - mean).powi(2))
                .sum::<f64>()
                / weight.max(1e-12);
            comp.weight = (weight / n).clamp(1e-9, 1.0);
            comp.mean = mean;
            comp.sigma = var.sqrt().max(sigma_floor);
        }
        if (ll - last_ll).abs() < 1e-10 * ll.abs().max(1.0) {
            break;
        }
        last_ll = ll;
    }
    comps
}

/// Segments a trace into low/high intensity states.
///
/// Refuses with [`TraceError::Unimodal`] when the fitted components overlap
/// so much that the exclusion band between their 2 sigma windows vanishes.
pub fn segment_states(trace: &IntensityTrace) -> Result<StateSegmentation, TraceError> {
    const MIN_BINS: usize = 100;
    if trace.len() < MIN_BINS {
        return Err(TraceError::TooFewBins {
            required: MIN_BINS,
            found: trace.len(),
        });
    }
    let data: Vec<f64> = trace.counts.iter().map(|&c| c as f64).collect();
    let comps = fit_mixture(&data);
    let (lo, hi) = if comps[0].mean <= comps[1].mean {
        (&comps[0], &comps[1])
    } else {
        (&comps[1], &comps[0])
    };

    let threshold_low = lo.mean + 2.0 * lo.sigma;
    let threshold_high = hi.mean - 2.0 * hi.sigma;
    if !(threshold_high > threshold_low) {
        return Err(TraceError::Unimodal);
    }

    let bin_labels = data
        .iter()
        .map(|&c| {
            if c >= threshold_high {
                StateLabel::High
            } else if c <= threshold_low {
                StateLabel::Low
            } else {
                StateLabel::Excluded
            }
        })
        .collect();
    Ok(StateSegmentation {
        bin_time: trace.bin_time,
        threshold_low,
        threshold_high,
        low_mean: lo.mean,
        high_mean: hi.mean,
        low_sigma: lo.sigma,
        high_sigma: hi.sigma,
        bin_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{EmitterModel, SimulationConfig};
    use crate::trace::bin_intensity;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, Poisson};

    fn trace_from_counts(counts: Vec<u64>) -> IntensityTrace {
        IntensityTrace {
            bin_time: 10e-3,
            start_time: 0.0,
            counts,
        }
    }

    #[test]
    fn constant_rate_trace_is_unimodal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let poisson = Poisson::new(50.0).unwrap();
        let counts: Vec<u64> = (0..500).map(|_| poisson.sample(&mut rng) as u64).collect();
        assert!(matches!(
            segment_states(&trace_from_counts(counts)),
            Err(TraceError::Unimodal)
        ));
    }

    #[test]
    fn short_traces_are_refused() {
        assert!(matches!(
            segment_states(&trace_from_counts(vec![5; 99])),
            Err(TraceError::TooFewBins { .. })
        ));
    }

    #[test]
    fn alternating_trace_labels_match_construction() {
        // Blocks of 100 +/- 10 and 20 +/- 4 counts per bin. About 2% of
        // bins drift into the exclusion band by construction, so the check
        // is that essentially none is assigned to the wrong state.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let high = Normal::new(100.0f64, 10.0).unwrap();
        let low = Normal::new(20.0, 4.0).unwrap();
        let mut counts = Vec::new();
        let mut truth = Vec::new();
        for block in 0..40 {
            for _ in 0..25 {
                let (dist, label) = if block % 2 == 0 {
                    (high, StateLabel::High)
                } else {
                    (low, StateLabel::Low)
                };
                counts.push(dist.sample(&mut rng).max(0.0).round() as u64);
                truth.push(label);
            }
        }
        let seg = segment_states(&trace_from_counts(counts)).unwrap();
        assert!(seg.threshold_low > 20.0 && seg.threshold_low < 60.0);
        assert!(seg.threshold_high > 60.0 && seg.threshold_high < 100.0);

        let mut wrong = 0;
        let mut undecided = 0;
        for (got, want) in seg.bin_labels.iter().zip(&truth) {
            match got {
                StateLabel::Excluded => undecided += 1,
                _ if got != want => wrong += 1,
                _ => {}
            }
        }
        assert_eq!(wrong, 0, "{wrong} bins assigned to the wrong state");
        assert!((undecided as f64) < 0.1 * truth.len() as f64);
        assert!((seg.low_mean - 20.0).abs() < 2.0);
        assert!((seg.high_mean - 100.0).abs() < 4.0);
    }

    fn slow_telegraph_config(seed: u64) -> SimulationConfig {
        SimulationConfig {
            model: EmitterModel {
                quantum_yield_bright: 0.9,
                quantum_yield_dim: 0.225,
                rate_charge: 4.0,
                rate_discharge: 6.0,
                ..EmitterModel::default()
            },
            duration: 60.0,
            detection_efficiency: 0.1,
            background_rate: 100.0,
            microtime_resolution: 1e-9,
            seed,
            ..SimulationConfig::default()
        }
    }

    #[test]
    fn occupancy_tracks_telegraph_rates_and_histogram_is_bimodal() {
        let config = slow_telegraph_config(21);
        let stream = crate::sim::simulate(&config).unwrap();
        let trace = bin_intensity(&stream, 10e-3);
        let seg = segment_states(&trace).unwrap();

        // Mode separation well beyond the combined widths (4:1 intensity
        // contrast between the states).
        let separation = seg.high_mean - seg.low_mean;
        assert!(
            separation > 3.0 * (seg.high_sigma + seg.low_sigma),
            "separation {separation} vs sigmas {} {}",
            seg.high_sigma,
            seg.low_sigma
        );

        let expected = config.model.bright_occupancy();
        let got = seg.high_fraction();
        assert!(
            (got - expected).abs() < 0.05,
            "occupancy {got} vs telegraph {expected}"
        );
    }

    #[test]
    fn mild_noise_spread_does_not_split_one_state() {
        // A single Gaussian mode, broader than Poisson but unimodal, must
        // still be refused.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let counts: Vec<u64> = (0..2000)
            .map(|_| {
                let base: f64 = rng.gen_range(95.0..105.0);
                let jitter = Normal::new(base, 12.0).unwrap();
                jitter.sample(&mut rng).max(0.0).round() as u64
            })
            .collect();
        assert!(matches!(
            segment_states(&trace_from_counts(counts)),
            Err(TraceError::Unimodal)
        ));
    }
}
