//! Saturation-curve and emission-spectrum fits.

use serde::{Deserialize, Serialize};

use super::TraceError;
use crate::fit::{least_squares, FitParameter, FitResult};

/// Gaussian spectrum fit summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumFit {
    /// Central emission wavelength, same unit as the input axis.
    pub cew: f64,
    /// Full width at half maximum, same unit as the input axis.
    pub fwhm: f64,
    /// Peak amplitude above the baseline.
    pub amplitude: f64,
    /// Constant baseline level.
    pub baseline: f64,
    /// Full fit metadata (uncertainties, convergence).
    pub fit: FitResult,
}

/// Fits `I(P) = A (1 - exp(-P/P_sat)) + B P` to (power, intensity) points.
///
/// Points are weighted by `1/max(I, 1)`, the Poisson variance of counted
/// intensities. `P_sat` is fitted in log space so it stays positive; its
/// initial guess is the power where the intensity first reaches half its
/// maximum.
pub fn fit_saturation(points: &[(f64, f64)]) -> Result<FitResult, TraceError> {
    const MIN_POINTS: usize = 5;
    if points.len() < MIN_POINTS {
        return Err(TraceError::InsufficientPoints {
            required: MIN_POINTS,
            found: points.len(),
        });
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let max_i = sorted.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if !(max_i > 0.0) {
        return Err(TraceError::FitDiverged);
    }

    let p_half = sorted
        .iter()
        .find(|p| p.1 >= 0.5 * max_i && p.0 > 0.0)
        .map(|p| p.0)
        .unwrap_or(sorted[sorted.len() - 1].0);
    let (last, prev) = (sorted[sorted.len() - 1], sorted[sorted.len() - 2]);
    let slope = if last.0 > prev.0 {
        ((last.1 - prev.1) / (last.0 - prev.0)).max(0.0)
    } else {
        0.0
    };

    let x: Vec<f64> = sorted.iter().map(|p| p.0).collect();
    let y: Vec<f64> = sorted.iter().map(|p| p.1).collect();
    let weights: Vec<f64> = y.iter().map(|&i| 1.0 / i.max(1.0)).collect();
    let p0 = [max_i, p_half.ln(), slope];

    let model = |p: &[f64], power: f64| -> f64 {
        let p_sat = p[1].exp();
        p[0] * (1.0 - (-power / p_sat).exp()) + p[2] * power
    };
    let fit = least_squares(model, &x, &y, &weights, &p0);
    if !fit.converged || fit.params.iter().any(|p| !p.is_finite()) {
        return Err(TraceError::FitDiverged);
    }
    let p_sat = fit.params[1].exp();
    Ok(FitResult {
        model: "saturation".into(),
        parameters: vec![
            FitParameter {
                name: "amplitude".into(),
                value: fit.params[0],
                uncertainty: fit.uncertainties[0],
            },
            FitParameter {
                name: "p_sat".into(),
                value: p_sat,
                uncertainty: p_sat * fit.uncertainties[1],
            },
            FitParameter {
                name: "linear_slope".into(),
                value: fit.params[2],
                uncertainty: fit.uncertainties[2],
            },
        ],
        residual_norm: fit.residual_norm,
        converged: fit.converged,
        iterations: fit.iterations,
        warnings: Vec::new(),
    })
}

/// Fits a Gaussian plus constant baseline to a spectrum and reports the
/// central wavelength and FWHM.
///
/// The samples above half height must form one contiguous wavelength run;
/// flat spectra and spectra with two comparable peaks are refused.
pub fn fit_spectrum(wavelengths: &[f64], intensities: &[f64]) -> Result<SpectrumFit, TraceError> {
    const MIN_POINTS: usize = 10;
    if wavelengths.len() != intensities.len() {
        return Err(TraceError::MismatchedSeries {
            left: wavelengths.len(),
            right: intensities.len(),
        });
    }
    if wavelengths.len() < MIN_POINTS {
        return Err(TraceError::InsufficientPoints {
            required: MIN_POINTS,
            found: wavelengths.len(),
        });
    }
    let min_i = intensities.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_i = intensities
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let range = max_i - min_i;
    if !(range > 0.0) {
        return Err(TraceError::NoPeak);
    }

    // Dominance check: everything above half height must be contiguous.
    let half = min_i + 0.5 * range;
    let mut runs = 0;
    let mut inside = false;
    let mut run_lo = 0usize;
    let mut run_hi = 0usize;
    for (i, &v) in intensities.iter().enumerate() {
        if v >= half {
            if !inside {
                runs += 1;
                run_lo = i;
            }
            inside = true;
            run_hi = i;
        } else {
            inside = false;
        }
    }
    if runs != 1 {
        return Err(TraceError::NoPeak);
    }

    let peak_idx = intensities
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    let grid_step = ((wavelengths[wavelengths.len() - 1] - wavelengths[0]).abs()
        / (wavelengths.len() - 1) as f64)
        .max(1e-12);
    let run_width = (wavelengths[run_hi] - wavelengths[run_lo])
        .abs()
        .max(grid_step);
    let sigma0 = run_width / (8.0 * std::f64::consts::LN_2).sqrt();

    let p0 = [range, wavelengths[peak_idx], sigma0, min_i];
    let model = |p: &[f64], lambda: f64| -> f64 {
        let z = (lambda - p[1]) / p[2];
        p[3] + p[0] * (-0.5 * z * z).exp()
    };
    let weights = vec![1.0; wavelengths.len()];
    let fit = least_squares(model, wavelengths, intensities, &weights, &p0);
    if !fit.converged || fit.params.iter().any(|p| !p.is_finite()) {
        return Err(TraceError::FitDiverged);
    }
    let sigma = fit.params[2].abs();
    if sigma == 0.0 {
        return Err(TraceError::FitDiverged);
    }
    let to_fwhm = (8.0 * std::f64::consts::LN_2).sqrt();
    let result = FitResult {
        model: "gaussian_spectrum".into(),
        parameters: vec![
            FitParameter {
                name: "cew".into(),
                value: fit.params[1],
                uncertainty: fit.uncertainties[1],
            },
            FitParameter {
                name: "fwhm".into(),
                value: to_fwhm * sigma,
                uncertainty: to_fwhm * fit.uncertainties[2],
            },
            FitParameter {
                name: "amplitude".into(),
                value: fit.params[0],
                uncertainty: fit.uncertainties[0],
            },
            FitParameter {
                name: "baseline".into(),
                value: fit.params[3],
                uncertainty: fit.uncertainties[3],
            },
        ],
        residual_norm: fit.residual_norm,
        converged: fit.converged,
        iterations: fit.iterations,
        warnings: Vec::new(),
    };
    Ok(SpectrumFit {
        cew: fit.params[1],
        fwhm: to_fwhm * sigma,
        amplitude: fit.params[0],
        baseline: fit.params[3],
        fit: result,
    })
}
