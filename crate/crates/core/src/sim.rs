//! Monte Carlo photon-stream generator for a pulsed single-photon emitter.
//!
//! The emitter is a two-level blinking dot: a continuous-time telegraph
//! process switches it between a bright and a dim state, and every sync
//! pulse deposits a Poisson number of excitons. A pulse with at least one
//! exciton can emit an exciton photon (with the state's quantum yield); a
//! pulse with at least two can additionally emit a biexciton photon first.
//! Detected photons are delayed by the relevant exponential lifetime,
//! smeared by a Gaussian instrument response, and routed to a uniformly
//! random detector channel. Uncorrelated background counts are added per
//! channel as a Poisson process.
//!
//! Streams are reproducible: the seed fixes the telegraph trajectory, the
//! per-chunk emission draws and the background draws on separate ChaCha
//! streams, so results do not depend on thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream::{Origin, PhotonRecord, PhotonStream, StreamHeader};

/// Pulses handled per RNG chunk; one ChaCha stream per chunk.
const CHUNK_PULSES: u64 = 1 << 21;
/// First RNG stream id reserved for per-channel background processes.
const BACKGROUND_STREAM_BASE: u64 = 1 << 40;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {reason}")]
    InvalidConfig { reason: String },
}

/// Photophysics of the blinking emitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmitterModel {
    /// Exciton lifetime in the bright state, seconds.
    pub lifetime_bright: f64,
    /// Exciton lifetime in the dim state, seconds.
    pub lifetime_dim: f64,
    /// Biexciton lifetime, seconds.
    pub lifetime_biexciton: f64,
    /// Exciton emission probability in the bright state.
    pub quantum_yield_bright: f64,
    /// Exciton emission probability in the dim state.
    pub quantum_yield_dim: f64,
    /// Biexciton emission probability (state independent).
    pub biexciton_yield: f64,
    /// Bright-to-dim switching rate, Hz.
    pub rate_charge: f64,
    /// Dim-to-bright switching rate, Hz.
    pub rate_discharge: f64,
}

impl Default for EmitterModel {
    fn default() -> Self {
        EmitterModel {
            lifetime_bright: 10e-9,
            lifetime_dim: 1.5e-9,
            lifetime_biexciton: 0.5e-9,
            quantum_yield_bright: 0.9,
            quantum_yield_dim: 0.3,
            biexciton_yield: 0.05,
            rate_charge: 1e3,
            rate_discharge: 1e3,
        }
    }
}

impl EmitterModel {
    /// Stationary probability of the bright state.
    pub fn bright_occupancy(&self) -> f64 {
        if self.rate_charge == 0.0 && self.rate_discharge == 0.0 {
            1.0
        } else {
            self.rate_discharge / (self.rate_charge + self.rate_discharge)
        }
    }
}

/// Full description of one simulated acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub model: EmitterModel,
    /// Excitation repetition rate, Hz.
    pub sync_rate: f64,
    /// Acquisition length, seconds.
    pub duration: f64,
    /// Mean excitons created per pulse (Poisson).
    pub mean_excitons: f64,
    /// Overall probability that an emitted photon is detected.
    pub detection_efficiency: f64,
    /// Uncorrelated background rate per channel, Hz.
    pub background_rate: f64,
    /// FWHM of the Gaussian instrument response, seconds (0 disables).
    pub irf_fwhm: f64,
    /// Microtime bin width, seconds.
    pub microtime_resolution: f64,
    /// Number of detector channels photons are split over.
    pub channel_count: u16,
    /// RNG seed; equal seeds give byte-identical streams.
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            model: EmitterModel::default(),
            sync_rate: 2.5e6,
            duration: 10.0,
            mean_excitons: 0.1,
            detection_efficiency: 0.05,
            background_rate: 100.0,
            irf_fwhm: 300e-12,
            microtime_resolution: 128e-12,
            channel_count: 2,
            seed: 1,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |reason: &str| {
            Err(SimError::InvalidConfig {
                reason: reason.to_string(),
            })
        };
        let m = &self.model;
        for (name, v) in [
            ("lifetime_bright", m.lifetime_bright),
            ("lifetime_dim", m.lifetime_dim),
            ("lifetime_biexciton", m.lifetime_biexciton),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return fail(&format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("quantum_yield_bright", m.quantum_yield_bright),
            ("quantum_yield_dim", m.quantum_yield_dim),
            ("biexciton_yield", m.biexciton_yield),
            ("detection_efficiency", self.detection_efficiency),
        ] {
            if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                return fail(&format!("{name} must lie in [0, 1]"));
            }
        }
        for (name, v) in [
            ("rate_charge", m.rate_charge),
            ("rate_discharge", m.rate_discharge),
            ("background_rate", self.background_rate),
            ("irf_fwhm", self.irf_fwhm),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(&format!("{name} must be non-negative"));
            }
        }
        if !(self.sync_rate.is_finite() && self.sync_rate > 0.0) {
            return fail("sync_rate must be positive");
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return fail("duration must be positive");
        }
        if !(self.mean_excitons.is_finite() && self.mean_excitons > 0.0) {
            return fail("mean_excitons must be positive");
        }
        if !(self.microtime_resolution.is_finite() && self.microtime_resolution > 0.0) {
            return fail("microtime_resolution must be positive");
        }
        if self.microtime_resolution >= 1.0 / self.sync_rate {
            return fail("microtime_resolution must be finer than the sync period");
        }
        if 1.0 / self.sync_rate / self.microtime_resolution > 65536.0 {
            return fail("microtime_resolution is too fine for 16-bit microtimes");
        }
        if self.channel_count == 0 || self.channel_count > 254 {
            return fail("channel_count must lie in 1..=254");
        }
        if self.duration * (m.rate_charge + m.rate_discharge) > 1e8 {
            return fail("switching rates are too fast for this duration");
        }
        Ok(())
    }

    fn header(&self) -> StreamHeader {
        StreamHeader {
            version: 1,
            channel_count: self.channel_count,
            sync_rate: self.sync_rate,
            microtime_resolution: self.microtime_resolution,
            macrotime_resolution: 1.0 / self.sync_rate,
            duration: self.duration,
            record_count: 0,
            origin: Origin::Simulated,
        }
    }
}

/// Per-pulse emission probabilities for one telegraph state.
#[derive(Clone, Copy)]
struct PulseProbs {
    /// Probability the pulse yields at least one detected photon.
    p_any: f64,
    /// Probability both the biexciton and the exciton photon are detected.
    p_both: f64,
    /// `p_both` plus the exciton-only probability (category threshold).
    p_upto_exciton: f64,
    /// Exciton lifetime for this state.
    tau_x: f64,
}

fn pulse_probs(config: &SimulationConfig, bright: bool) -> PulseProbs {
    let m = &config.model;
    let n = config.mean_excitons;
    let eta = config.detection_efficiency;
    let qy = if bright {
        m.quantum_yield_bright
    } else {
        m.quantum_yield_dim
    };
    // Poisson exciton number: P(>=1) and P(>=2).
    let p1 = -(-n).exp_m1();
    let p2 = p1 - n * (-n).exp();
    let p_x = p1 * qy * eta;
    let p_b = p2 * m.biexciton_yield * eta;
    let p_both = p2 * qy * eta * m.biexciton_yield * eta;
    PulseProbs {
        p_any: p_x + p_b - p_both,
        p_both,
        p_upto_exciton: p_x, // p_both + (p_x - p_both)
        tau_x: if bright {
            m.lifetime_bright
        } else {
            m.lifetime_dim
        },
    }
}

/// Mean detected count rate (all channels) while the emitter sits in one
/// state, including background.
fn state_rate(config: &SimulationConfig, bright: bool) -> f64 {
    let m = &config.model;
    let n = config.mean_excitons;
    let qy = if bright {
        m.quantum_yield_bright
    } else {
        m.quantum_yield_dim
    };
    let p1 = -(-n).exp_m1();
    let p2 = p1 - n * (-n).exp();
    config.sync_rate * config.detection_efficiency * (p1 * qy + p2 * m.biexciton_yield)
        + config.channel_count as f64 * config.background_rate
}

/// Long-delay correlation plateau implied by the config's two-state
/// intensities: `sum_s p_s I_s^2 / (sum_s p_s I_s)^2`.
pub fn analytic_flicker_plateau(config: &SimulationConfig) -> f64 {
    let p_bright = config.model.bright_occupancy();
    let i_b = state_rate(config, true);
    let i_d = state_rate(config, false);
    let mean = p_bright * i_b + (1.0 - p_bright) * i_d;
    (p_bright * i_b * i_b + (1.0 - p_bright) * i_d * i_d) / (mean * mean)
}

/// Telegraph trajectory as contiguous pulse ranges with a fixed state.
struct Segment {
    start_pulse: u64,
    end_pulse: u64,
    bright: bool,
}

fn telegraph_segments(config: &SimulationConfig, total_pulses: u64) -> Vec<Segment> {
    let m = &config.model;
    let period = 1.0 / config.sync_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0);

    let mut bright = rng.gen::<f64>() < m.bright_occupancy();
    let mut segments = Vec::new();
    let mut t = 0.0;
    let mut start_pulse = 0u64;
    while start_pulse < total_pulses {
        let exit_rate = if bright {
            m.rate_charge
        } else {
            m.rate_discharge
        };
        let t_next = if exit_rate > 0.0 {
            t + Exp::new(exit_rate).unwrap().sample(&mut rng)
        } else {
            f64::INFINITY
        };
        let end_pulse = if t_next >= config.duration {
            total_pulses
        } else {
            (((t_next / period).ceil()) as u64).min(total_pulses)
        };
        if end_pulse > start_pulse {
            segments.push(Segment {
                start_pulse,
                end_pulse,
                bright,
            });
        }
        start_pulse = end_pulse;
        t = t_next;
        bright = !bright;
    }
    segments
}

/// Emits photons for pulses `[chunk_start, chunk_end)`, skipping dark pulses
/// with geometric jumps. Jumps truncated at a state boundary are resampled
/// in the next segment, which is exact for memoryless trials.
#[allow(clippy::too_many_arguments)]
fn emit_chunk(
    config: &SimulationConfig,
    segments: &[Segment],
    probs: &[PulseProbs; 2],
    chunk_start: u64,
    chunk_end: u64,
    rng: &mut ChaCha8Rng,
) -> Vec<PhotonRecord> {
    let period = 1.0 / config.sync_rate;
    let slots = config.header().microtime_slots();
    let exp_bx = Exp::new(1.0 / config.model.lifetime_biexciton).unwrap();
    let jitter = if config.irf_fwhm > 0.0 {
        let sigma = config.irf_fwhm / (8.0 * 2f64.ln()).sqrt();
        Some(Normal::new(0.0, sigma).unwrap())
    } else {
        None
    };
    let mut out = Vec::new();

    let push_photon =
        |rng: &mut ChaCha8Rng, pulse: u64, delay: f64, out: &mut Vec<PhotonRecord>| {
            let mut t = delay;
            if let Some(j) = jitter {
                t = (t + j.sample(rng)).max(0.0);
            }
            let extra = (t / period).floor() as u64;
            let micro_f = t - extra as f64 * period;
            let microtime = ((micro_f / config.microtime_resolution) as u32).min(slots - 1) as u16;
            let channel = if config.channel_count == 1 {
                0
            } else {
                rng.gen_range(0..config.channel_count) as u8
            };
            out.push(PhotonRecord {
                channel,
                macrotime: pulse + extra,
                microtime,
            });
        };

    let first_seg = segments.partition_point(|s| s.end_pulse <= chunk_start);
    for seg in &segments[first_seg..] {
        if seg.start_pulse >= chunk_end {
            break;
        }
        let lo = seg.start_pulse.max(chunk_start);
        let hi = seg.end_pulse.min(chunk_end);
        let pp = probs[seg.bright as usize];
        if pp.p_any <= 0.0 {
            continue;
        }
        let exp_x = Exp::new(1.0 / pp.tau_x).unwrap();
        let log1m = (1.0 - pp.p_any).ln();
        let mut pulse = lo;
        while pulse < hi {
            let u: f64 = rng.gen();
            let skip = if pp.p_any >= 1.0 - 1e-12 {
                0
            } else {
                let k = ((1.0 - u).ln() / log1m).floor();
                if k >= (hi - pulse) as f64 {
                    break;
                }
                k as u64
            };
            let target = pulse + skip;
            if target >= hi {
                break;
            }
            let v: f64 = rng.gen::<f64>() * pp.p_any;
            if v < pp.p_both {
                let d_bx = exp_bx.sample(rng);
                push_photon(rng, target, d_bx, &mut out);
                let d_x = d_bx + exp_x.sample(rng);
                push_photon(rng, target, d_x, &mut out);
            } else if v < pp.p_upto_exciton {
                let d_x = exp_x.sample(rng);
                push_photon(rng, target, d_x, &mut out);
            } else {
                let d_bx = exp_bx.sample(rng);
                push_photon(rng, target, d_bx, &mut out);
            }
            pulse = target + 1;
        }
    }
    out
}

fn background_records(config: &SimulationConfig) -> Vec<PhotonRecord> {
    if config.background_rate <= 0.0 {
        return Vec::new();
    }
    let period = 1.0 / config.sync_rate;
    let slots = config.header().microtime_slots();
    let gap = Exp::new(config.background_rate).unwrap();
    let mut out = Vec::new();
    for det in 0..config.channel_count {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(BACKGROUND_STREAM_BASE + det as u64);
        let mut t = 0.0;
        loop {
            t += gap.sample(&mut rng);
            if t >= config.duration {
                break;
            }
            let macrotime = (t / period).floor() as u64;
            let micro_f = t - macrotime as f64 * period;
            let microtime = ((micro_f / config.microtime_resolution) as u32).min(slots - 1) as u16;
            out.push(PhotonRecord {
                channel: det as u8,
                macrotime,
                microtime,
            });
        }
    }
    out
}

/// Runs the simulation and returns a validated photon stream.
pub fn simulate(config: &SimulationConfig) -> Result<PhotonStream, SimError> {
    config.validate()?;
    let period = 1.0 / config.sync_rate;
    let total_pulses = (config.duration / period).floor() as u64;
    let segments = telegraph_segments(config, total_pulses);
    let probs = [pulse_probs(config, false), pulse_probs(config, true)];

    let n_chunks = total_pulses.div_ceil(CHUNK_PULSES);
    let mut records: Vec<PhotonRecord> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(1 + ci);
            let start = ci * CHUNK_PULSES;
            let end = (start + CHUNK_PULSES).min(total_pulses);
            emit_chunk(config, &segments, &probs, start, end, &mut rng)
        })
        .reduce(Vec::new, |mut a, mut b| {
            a.append(&mut b);
            a
        });
    records.append(&mut background_records(config));

    // Order by arrival time; microtimes never span a full period, so the
    // (macrotime, microtime) pair is the arrival order.
    let slots = config.header().microtime_slots();
    records.retain(|r| {
        r.macrotime as f64 * period + r.microtime as f64 * config.microtime_resolution
            < config.duration
    });
    records.sort_unstable_by_key(|r| (r.macrotime, r.microtime, r.channel));
    // Identical (macrotime, microtime, channel) triples would be ambiguous;
    // nudge later arrivals forward one microtime slot until unique.
    loop {
        let mut bumped = false;
        for i in 1..records.len() {
            if records[i] == records[i - 1] {
                let r = &mut records[i];
                if (r.microtime as u32) + 1 < slots {
                    r.microtime += 1;
                } else {
                    r.macrotime += 1;
                    r.microtime = 0;
                }
                bumped = true;
            }
        }
        if !bumped {
            break;
        }
        records.sort_unstable_by_key(|r| (r.macrotime, r.microtime, r.channel));
    }

    let stream =
        PhotonStream::new(config.header(), records).expect("simulator emitted an invalid stream");
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_config() -> SimulationConfig {
        SimulationConfig {
            model: EmitterModel {
                lifetime_bright: 5e-9,
                lifetime_dim: 1e-9,
                lifetime_biexciton: 0.5e-9,
                quantum_yield_bright: 0.8,
                quantum_yield_dim: 0.8,
                biexciton_yield: 0.0,
                rate_charge: 0.0,
                rate_discharge: 0.0,
            },
            sync_rate: 1e6,
            duration: 1.0,
            mean_excitons: 0.2,
            detection_efficiency: 0.1,
            background_rate: 0.0,
            irf_fwhm: 0.0,
            microtime_resolution: 128e-12,
            channel_count: 2,
            seed: 7,
        }
    }

    #[test]
    fn equal_seeds_reproduce_and_different_seeds_differ() {
        let config = quiet_config();
        let a = simulate(&config).unwrap();
        let b = simulate(&config).unwrap();
        assert_eq!(a, b);
        let mut other = config;
        other.seed = 8;
        let c = simulate(&other).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn emission_rate_matches_expectation() {
        let config = quiet_config();
        let stream = simulate(&config).unwrap();
        // 1e6 pulses, P(>=1 exciton) = 1 - exp(-0.2), qy 0.8, eta 0.1.
        let p1 = 1.0 - (-0.2f64).exp();
        let expected = 1e6 * p1 * 0.8 * 0.1;
        let sigma = expected.sqrt();
        let n = stream.records.len() as f64;
        assert!(
            (n - expected).abs() < 4.0 * sigma,
            "count {n} far from expectation {expected}"
        );
    }

    #[test]
    fn background_only_rate_matches_expectation() {
        let mut config = quiet_config();
        config.model.quantum_yield_bright = 0.0;
        config.model.quantum_yield_dim = 0.0;
        config.background_rate = 1e5;
        let stream = simulate(&config).unwrap();
        // Two channels at 1e5 Hz for 1 s.
        let expected = 2e5_f64;
        let sigma = expected.sqrt();
        let n = stream.records.len() as f64;
        assert!((n - expected).abs() < 4.0 * sigma);
        // Background microtimes are uniform over the sync period.
        let mean_micro = stream
            .records
            .iter()
            .map(|r| r.microtime as f64)
            .sum::<f64>()
            / n;
        let slots = stream.header.microtime_slots() as f64;
        assert!((mean_micro - slots / 2.0).abs() < slots * 0.01);
    }

    #[test]
    fn microtime_distribution_follows_lifetime() {
        let config = quiet_config();
        let stream = simulate(&config).unwrap();
        let res = config.microtime_resolution;
        let n = stream.records.len() as f64;
        let mean_delay = stream
            .records
            .iter()
            .map(|r| r.microtime as f64 * res)
            .sum::<f64>()
            / n;
        // Half a bin of quantization offset plus 4-sigma sampling slack.
        let slack = 4.0 * 5e-9 / n.sqrt() + res;
        assert!(
            (mean_delay - 5e-9).abs() < slack,
            "mean delay {mean_delay} not near 5 ns"
        );
    }

    #[test]
    fn channels_are_split_evenly() {
        let config = quiet_config();
        let stream = simulate(&config).unwrap();
        let n0 = stream.channel_count_of(0) as f64;
        let n1 = stream.channel_count_of(1) as f64;
        let total = n0 + n1;
        assert!((n0 - total / 2.0).abs() < 4.0 * (total / 4.0).sqrt());
    }

    #[test]
    fn telegraph_modulates_intensity() {
        let mut config = quiet_config();
        config.model.quantum_yield_dim = 0.0;
        config.model.rate_charge = 50.0;
        config.model.rate_discharge = 50.0;
        let stream = simulate(&config).unwrap();
        // Roughly half the time the dot is dark, so the rate should sit
        // near half the always-bright rate.
        let p1 = 1.0 - (-0.2f64).exp();
        let bright_rate = 1e6 * p1 * 0.8 * 0.1;
        let n = stream.records.len() as f64;
        assert!(n < 0.75 * bright_rate, "dim state not visible: {n}");
        assert!(n > 0.25 * bright_rate);
    }

    #[test]
    fn analytic_plateau_handles_two_to_one_contrast() {
        let mut config = quiet_config();
        config.model.quantum_yield_bright = 0.8;
        config.model.quantum_yield_dim = 0.4;
        config.model.rate_charge = 100.0;
        config.model.rate_discharge = 100.0;
        // I_bright = 2 I_dim and p = 1/2 give 0.5(4+1)/(0.5*3)^2 = 10/9.
        let a = analytic_flicker_plateau(&config);
        assert!((a - 10.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut config = quiet_config();
        config.detection_efficiency = 1.5;
        assert!(simulate(&config).is_err());
        let mut config = quiet_config();
        config.microtime_resolution = 2e-6;
        assert!(simulate(&config).is_err());
        let mut config = quiet_config();
        config.model.lifetime_bright = 0.0;
        assert!(simulate(&config).is_err());
    }

    #[test]
    fn stream_is_valid_with_jitter_and_long_lifetimes() {
        let mut config = quiet_config();
        // Lifetime comparable to the period forces wrap-around handling.
        config.model.lifetime_bright = 0.4e-6;
        config.irf_fwhm = 2e-9;
        config.duration = 0.2;
        let stream = simulate(&config).unwrap();
        assert!(stream.records.len() > 1000);
        // With tau = 0.4 periods a few percent of delays land in the last
        // tenth of the period, so the microtime range must be fully used.
        let slots = stream.header.microtime_slots();
        let deep = stream
            .records
            .iter()
            .filter(|r| r.microtime as u32 >= slots * 9 / 10)
            .count();
        assert!(deep > 10, "deep-tail arrivals missing: {deep}");
    }
}
