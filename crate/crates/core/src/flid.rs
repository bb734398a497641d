//! Fluorescence lifetime-intensity distribution (FLID) maps.
//!
//! Each trace bin with at least one photon contributes a sample point
//! (counts per bin, mean arrival time). A product-Gaussian kernel density
//! estimate of those samples is evaluated on a rectangular grid spanning
//! intensity 0 to 1.1x the maximum and one full sync period of arrival
//! time, then renormalized so the quadrature sum over the grid is exactly
//! one.
//!
//! Determinism: samples are accumulated in a canonical sort order and the
//! grid is parallelized over intensity rows only, so the map is bit
//! identical under sample permutation and any thread count.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream::PhotonStream;
use crate::trace::{bin_intensity, mean_arrival_trace, IntensityTrace, LifetimeTrace};

/// Errors from FLID construction.
#[derive(Debug, Error)]
pub enum FlidError {
    #[error("traces mismatched: {reason}")]
    MismatchedTraces { reason: String },
    #[error("too few defined sample pairs: {found} < {required}")]
    TooFewSamples { required: usize, found: usize },
    #[error("invalid parameter: {reason}")]
    InvalidParameter { reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Kernel density map over (intensity, mean arrival time).
#[derive(Debug, Clone, PartialEq)]
pub struct FlidMap {
    /// Cell-center intensities, counts per bin.
    pub intensity_axis: Vec<f64>,
    /// Cell-center arrival times, seconds.
    pub lifetime_axis: Vec<f64>,
    /// Row-major density, `intensity_axis.len() * lifetime_axis.len()`
    /// entries; row = intensity index, column = lifetime index.
    pub density: Vec<f64>,
    /// Kernel bandwidths (counts per bin, seconds).
    pub bandwidths: (f64, f64),
    /// Number of sample pairs behind the map.
    pub sample_count: usize,
}

/// One local maximum of a FLID map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlidMode {
    /// Intensity coordinate, counts per bin.
    pub intensity: f64,
    /// Arrival-time coordinate, seconds.
    pub lifetime: f64,
    /// Density at the mode.
    pub density: f64,
}

impl FlidMap {
    /// Density at (intensity row, lifetime column).
    pub fn at(&self, i: usize, t: usize) -> f64 {
        self.density[i * self.lifetime_axis.len() + t]
    }

    /// Cell area, (counts per bin) x seconds.
    pub fn cell_area(&self) -> f64 {
        let wi = self.intensity_axis[1] - self.intensity_axis[0];
        let wt = self.lifetime_axis[1] - self.lifetime_axis[0];
        wi * wt
    }

    /// Quadrature sum `sum(density) * cell_area`; one up to rounding.
    pub fn quadrature(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.cell_area()
    }

    /// Local maxima after merging peaks of topographic prominence below 1%
    /// of the global maximum, sorted by descending density.
    ///
    /// Cells are flooded in order of descending density; when two basins
    /// meet, the lower peak's prominence is fixed at its height above the
    /// meeting saddle and the basins merge, so shallow ripples on a
    /// plateau collapse into their parent peak.
    pub fn modes(&self) -> Vec<FlidMode> {
        let (ni, nt) = (self.intensity_axis.len(), self.lifetime_axis.len());
        let d = &self.density;
        let max_density = d.iter().cloned().fold(0.0, f64::max);
        if max_density <= 0.0 {
            return Vec::new();
        }
        let threshold = 0.01 * max_density;

        let mut order: Vec<usize> = (0..d.len()).collect();
        order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));

        // Union-find over flooded cells; each basin root remembers its
        // peak cell.
        let mut parent: Vec<usize> = vec![usize::MAX; d.len()];
        let mut peak_of: Vec<usize> = vec![usize::MAX; d.len()];
        let mut prominence: Vec<f64> = vec![f64::NAN; d.len()];
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }

        let mut peaks: Vec<usize> = Vec::new();
        for &cell in &order {
            let (ci, ct) = (cell / nt, cell % nt);
            let mut roots: Vec<usize> = Vec::new();
            for di in -1i64..=1 {
                for dt in -1i64..=1 {
                    if di == 0 && dt == 0 {
                        continue;
                    }
                    let (ui, ut) = (ci as i64 + di, ct as i64 + dt);
                    if ui < 0 || ut < 0 || ui >= ni as i64 || ut >= nt as i64 {
                        continue;
                    }
                    let n = ui as usize * nt + ut as usize;
                    if parent[n] != usize::MAX {
                        let r = find(&mut parent, n);
                        if !roots.contains(&r) {
                            roots.push(r);
                        }
                    }
                }
            }
            if roots.is_empty() {
                parent[cell] = cell;
                peak_of[cell] = cell;
                peaks.push(cell);
                continue;
            }
            // Tallest neighbor basin absorbs the cell and any merging
            // basins; lower peaks get their prominence fixed here.
            roots.sort_by(|&a, &b| {
                d[peak_of[b]]
                    .total_cmp(&d[peak_of[a]])
                    .then(peak_of[a].cmp(&peak_of[b]))
            });
            let master = roots[0];
            parent[cell] = master;
            for &r in &roots[1..] {
                let p = peak_of[r];
                if prominence[p].is_nan() {
                    prominence[p] = d[p] - d[cell];
                }
                parent[r] = master;
            }
        }

        let mut out: Vec<FlidMode> = peaks
            .iter()
            .filter(|&&p| prominence[p].is_nan() || prominence[p] >= threshold)
            .map(|&p| FlidMode {
                intensity: self.intensity_axis[p / nt],
                lifetime: self.lifetime_axis[p % nt],
                density: d[p],
            })
            .collect();
        out.sort_by(|a, b| b.density.total_cmp(&a.density));
        out
    }

    /// Second-moment spread: square root of the determinant of the density
    /// covariance over (intensity, lifetime).
    pub fn spread(&self) -> f64 {
        let area = self.cell_area();
        let nt = self.lifetime_axis.len();
        let (mut mi, mut mt) = (0.0, 0.0);
        for (k, &dv) in self.density.iter().enumerate() {
            let w = dv * area;
            mi += w * self.intensity_axis[k / nt];
            mt += w * self.lifetime_axis[k % nt];
        }
        let (mut vii, mut vtt, mut vit) = (0.0, 0.0, 0.0);
        for (k, &dv) in self.density.iter().enumerate() {
            let w = dv * area;
            let di = self.intensity_axis[k / nt] - mi;
            let dt = self.lifetime_axis[k % nt] - mt;
            vii += w * di * di;
            vtt += w * dt * dt;
            vit += w * di * dt;
        }
        (vii * vtt - vit * vit).max(0.0).sqrt()
    }

    /// Writes the density as a plain CSV matrix, one row per intensity
    /// cell, one column per lifetime cell.
    pub fn write_csv(&self, path: &Path) -> Result<(), FlidError> {
        let mut out = BufWriter::new(File::create(path)?);
        let nt = self.lifetime_axis.len();
        for row in self.density.chunks(nt) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    fn gray_bytes(&self) -> Vec<u8> {
        let max = self.density.iter().cloned().fold(0.0, f64::max).max(1e-300);
        self.density
            .iter()
            .map(|&v| (v / max * 255.0).round() as u8)
            .collect()
    }

    /// Writes an 8-bit grayscale PGM (P5); columns are lifetime cells.
    pub fn write_pgm(&self, path: &Path) -> Result<(), FlidError> {
        let mut out = BufWriter::new(File::create(path)?);
        let (w, h) = (self.lifetime_axis.len(), self.intensity_axis.len());
        write!(out, "P5\n{w} {h}\n255\n")?;
        out.write_all(&self.gray_bytes())?;
        Ok(())
    }

    /// Writes a color PPM (P6) using a perceptually uniform colormap.
    pub fn write_ppm(&self, path: &Path) -> Result<(), FlidError> {
        let mut out = BufWriter::new(File::create(path)?);
        let (w, h) = (self.lifetime_axis.len(), self.intensity_axis.len());
        write!(out, "P6\n{w} {h}\n255\n")?;
        let mut rgb = Vec::with_capacity(3 * self.density.len());
        for &g in &self.gray_bytes() {
            rgb.extend_from_slice(&viridis(g));
        }
        out.write_all(&rgb)?;
        Ok(())
    }
}

/// Viridis colormap anchors, interpolated linearly.
fn viridis(v: u8) -> [u8; 3] {
    const ANCHORS: [[f64; 3]; 16] = [
        [68.0, 1.0, 84.0],
        [72.0, 26.0, 108.0],
        [71.0, 47.0, 125.0],
        [65.0, 68.0, 135.0],
        [57.0, 86.0, 140.0],
        [49.0, 104.0, 142.0],
        [42.0, 120.0, 142.0],
        [35.0, 136.0, 142.0],
        [31.0, 152.0, 139.0],
        [34.0, 168.0, 132.0],
        [53.0, 183.0, 121.0],
        [84.0, 197.0, 104.0],
        [122.0, 209.0, 81.0],
        [165.0, 219.0, 54.0],
        [210.0, 226.0, 27.0],
        [253.0, 231.0, 37.0],
    ];
    let x = v as f64 / 255.0 * 15.0;
    let lo = (x.floor() as usize).min(14);
    let f = x - lo as f64;
    let mut rgb = [0u8; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        *out = (ANCHORS[lo][c] + f * (ANCHORS[lo + 1][c] - ANCHORS[lo][c])).round() as u8;
    }
    rgb
}

/// Sample pairs (counts per bin, mean arrival) from matched traces.
fn paired_samples(
    intensity: &IntensityTrace,
    lifetime: &LifetimeTrace,
) -> Result<Vec<(f64, f64)>, FlidError> {
    const MIN_SAMPLES: usize = 100;
    if intensity.bin_time != lifetime.bin_time {
        return Err(FlidError::MismatchedTraces {
            reason: format!("bin_time {} vs {}", intensity.bin_time, lifetime.bin_time),
        });
    }
    if intensity.len() != lifetime.len() {
        return Err(FlidError::MismatchedTraces {
            reason: format!("length {} vs {}", intensity.len(), lifetime.len()),
        });
    }
    let samples: Vec<(f64, f64)> = intensity
        .counts
        .iter()
        .zip(&lifetime.mean_arrival)
        .filter_map(|(&c, a)| a.map(|t| (c as f64, t)))
        .collect();
    if samples.len() < MIN_SAMPLES {
        return Err(FlidError::TooFewSamples {
            required: MIN_SAMPLES,
            found: samples.len(),
        });
    }
    Ok(samples)
}

/// Silverman's rule bandwidth, with a fallback of 1% of the window for
/// degenerate samples whose spread is indistinguishable from rounding
/// noise on the mean.
fn silverman(values: impl Iterator<Item = f64> + Clone, n: usize, window: f64) -> f64 {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd > 1e-12 * mean.abs() {
        1.06 * sd * (n as f64).powf(-0.2)
    } else {
        0.01 * window
    }
}

fn validate_grid(grid: (usize, usize)) -> Result<(), FlidError> {
    if grid.0 < 2 || grid.1 < 2 {
        return Err(FlidError::InvalidParameter {
            reason: format!("grid {}x{} too small", grid.0, grid.1),
        });
    }
    if grid.0.saturating_mul(grid.1) > (1 << 24) {
        return Err(FlidError::InvalidParameter {
            reason: format!("grid {}x{} too large", grid.0, grid.1),
        });
    }
    Ok(())
}

/// KDE evaluation over a fixed window; the core of [`build_flid`].
fn build_on_window(
    mut samples: Vec<(f64, f64)>,
    grid: (usize, usize),
    bandwidth: Option<(f64, f64)>,
    window: (f64, f64),
) -> Result<FlidMap, FlidError> {
    let n = samples.len();
    let (hi_i, hi_t) = window;
    let (ni, nt) = grid;

    // Canonical order makes every downstream float reduction, bandwidth
    // selection included, independent of the caller's sample order.
    samples.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let h_i = match bandwidth {
        Some((h, _)) => h,
        None => silverman(samples.iter().map(|s| s.0), n, hi_i),
    };
    let h_t = match bandwidth {
        Some((_, h)) => h,
        None => silverman(samples.iter().map(|s| s.1), n, hi_t),
    };
    if !(h_i > 0.0 && h_t > 0.0 && h_i.is_finite() && h_t.is_finite()) {
        return Err(FlidError::InvalidParameter {
            reason: format!("bandwidths ({h_i}, {h_t}) must be positive"),
        });
    }

    let w_i = hi_i / ni as f64;
    let w_t = hi_t / nt as f64;
    let intensity_axis: Vec<f64> = (0..ni).map(|k| (k as f64 + 0.5) * w_i).collect();
    let lifetime_axis: Vec<f64> = (0..nt).map(|k| (k as f64 + 0.5) * w_t).collect();

    const REACH: f64 = 6.0;
    let rows: Vec<Vec<f64>> = (0..ni)
        .into_par_iter()
        .map(|row| {
            let ic = intensity_axis[row];
            let lo = samples.partition_point(|s| s.0 < ic - REACH * h_i);
            let hi = samples.partition_point(|s| s.0 <= ic + REACH * h_i);
            let mut cells = vec![0.0f64; nt];
            for s in &samples[lo..hi] {
                let zi = (ic - s.0) / h_i;
                let wi = (-0.5 * zi * zi).exp();
                let t_lo = (((s.1 - REACH * h_t) / w_t - 0.5).ceil().max(0.0)) as usize;
                let t_hi = ((((s.1 + REACH * h_t) / w_t - 0.5).floor()) as usize).min(nt - 1);
                for t in t_lo..=t_hi.max(t_lo) {
                    if t >= nt {
                        break;
                    }
                    let zt = (lifetime_axis[t] - s.1) / h_t;
                    cells[t] += wi * (-0.5 * zt * zt).exp();
                }
            }
            cells
        })
        .collect();

    let mut density: Vec<f64> = rows.into_iter().flatten().collect();
    let total: f64 = density.iter().sum();
    if !(total > 0.0) {
        return Err(FlidError::InvalidParameter {
            reason: "all samples fell outside the grid window".into(),
        });
    }
    let scale = 1.0 / (total * w_i * w_t);
    for v in &mut density {
        *v *= scale;
    }

    Ok(FlidMap {
        intensity_axis,
        lifetime_axis,
        density,
        bandwidths: (h_i, h_t),
        sample_count: n,
    })
}

/// Builds a FLID map from matched intensity and lifetime traces.
///
/// The grid spans intensity `[0, 1.1 * max]` by arrival `[0, sync period]`.
/// `bandwidth` overrides Silverman's rule per axis.
pub fn build_flid(
    intensity: &IntensityTrace,
    lifetime: &LifetimeTrace,
    grid: (usize, usize),
    bandwidth: Option<(f64, f64)>,
) -> Result<FlidMap, FlidError> {
    validate_grid(grid)?;
    let samples = paired_samples(intensity, lifetime)?;
    let max_i = samples.iter().map(|s| s.0).fold(0.0, f64::max);
    let window = (1.1 * max_i.max(1.0), lifetime.period);
    build_on_window(samples, grid, bandwidth, window)
}

/// Builds one FLID map per stream with shared axis ranges, so maps across
/// an excitation-power series are directly comparable.
pub fn flid_power_series(
    streams: &[(f64, PhotonStream)],
    bin_time: f64,
    grid: (usize, usize),
    bandwidth: Option<(f64, f64)>,
) -> Result<Vec<FlidMap>, FlidError> {
    validate_grid(grid)?;
    let mut all_samples = Vec::with_capacity(streams.len());
    let mut max_i = 0.0f64;
    let mut max_period = 0.0f64;
    for (_, stream) in streams {
        let intensity = bin_intensity(stream, bin_time);
        let lifetime = mean_arrival_trace(stream, bin_time);
        let samples = paired_samples(&intensity, &lifetime)?;
        max_i = max_i.max(samples.iter().map(|s| s.0).fold(0.0, f64::max));
        max_period = max_period.max(lifetime.period);
        all_samples.push(samples);
    }
    all_samples
        .into_iter()
        .map(|samples| {
            build_on_window(samples, grid, bandwidth, (1.1 * max_i.max(1.0), max_period))
        })
        .collect()
}
