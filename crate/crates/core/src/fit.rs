//! Shared nonlinear fitting machinery.
//!
//! Two engines cover the crate's needs: damped least squares
//! (Levenberg-Marquardt with a numeric Jacobian) for curve fits with
//! per-point weights, and Fisher scoring for Poisson-distributed histogram
//! counts. Both report parameter uncertainties from the local curvature.

use serde::{Deserialize, Serialize};

/// One fitted parameter with its 1-sigma uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParameter {
    pub name: String,
    pub value: f64,
    pub uncertainty: f64,
}

/// Outcome of a model fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Short model identifier, e.g. "monoexponential".
    pub model: String,
    pub parameters: Vec<FitParameter>,
    /// Square root of the final weighted objective.
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

impl FitResult {
    /// Looks up a parameter by name.
    pub fn parameter(&self, name: &str) -> Option<&FitParameter> {
        self.parameters.iter().find(|p| p.name == name)
    }

    /// Value of a named parameter; panics if absent.
    pub fn value(&self, name: &str) -> f64 {
        self.parameter(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
            .value
    }
}

/// Solves `a x = b` in place by Gaussian elimination with partial pivoting.
/// Returns `None` when the system is singular to working precision.
pub(crate) fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
        if !x[row].is_finite() {
            return None;
        }
    }
    Some(x)
}

/// Inverts a symmetric positive matrix column by column; `None` if singular.
fn invert(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        cols.push(solve(a.to_vec(), e)?);
    }
    let mut inv = vec![vec![0.0; n]; n];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..n {
            inv[i][j] = col[i];
        }
    }
    Some(inv)
}

fn jacobian<F>(model: &F, x: &[f64], params: &[f64]) -> Vec<Vec<f64>>
where
    F: Fn(&[f64], f64) -> f64,
{
    let n = x.len();
    let k = params.len();
    let mut jac = vec![vec![0.0; k]; n];
    let mut p = params.to_vec();
    for j in 0..k {
        let h = 1e-6 * params[j].abs().max(1e-9);
        p[j] = params[j] + h;
        let hi: Vec<f64> = x.iter().map(|&xi| model(&p, xi)).collect();
        p[j] = params[j] - h;
        let lo: Vec<f64> = x.iter().map(|&xi| model(&p, xi)).collect();
        p[j] = params[j];
        for i in 0..n {
            jac[i][j] = (hi[i] - lo[i]) / (2.0 * h);
        }
    }
    jac
}

pub(crate) struct LeastSquaresFit {
    pub params: Vec<f64>,
    pub uncertainties: Vec<f64>,
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Minimizes `sum_i w_i (y_i - f(params, x_i))^2` starting from `p0`.
///
/// The covariance is `(J^T W J)^-1` scaled by the reduced chi-square, which
/// keeps uncertainties meaningful when the weights are only proportional to
/// `1/sigma^2`.
pub(crate) fn least_squares<F>(
    model: F,
    x: &[f64],
    y: &[f64],
    weights: &[f64],
    p0: &[f64],
) -> LeastSquaresFit
where
    F: Fn(&[f64], f64) -> f64,
{
    assert_eq!(x.len(), y.len());
    assert_eq!(x.len(), weights.len());
    let n = x.len();
    let k = p0.len();
    let chi2 = |p: &[f64]| -> f64 {
        x.iter()
            .zip(y)
            .zip(weights)
            .map(|((&xi, &yi), &wi)| {
                let r = yi - model(p, xi);
                wi * r * r
            })
            .sum()
    };

    let mut params = p0.to_vec();
    let mut best = chi2(&params);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..200 {
        iterations = iter + 1;
        let jac = jacobian(&model, x, &params);
        // Normal equations J^T W J and gradient J^T W r.
        let mut jtj = vec![vec![0.0; k]; k];
        let mut jtr = vec![0.0; k];
        for i in 0..n {
            let r = y[i] - model(&params, x[i]);
            let w = weights[i];
            for a in 0..k {
                jtr[a] += w * jac[i][a] * r;
                for b in a..k {
                    jtj[a][b] += w * jac[i][a] * jac[i][b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                jtj[a][b] = jtj[b][a];
            }
        }

        let mut accepted = false;
        for _ in 0..25 {
            let mut damped = jtj.clone();
            for (a, row) in damped.iter_mut().enumerate() {
                row[a] += lambda * jtj[a][a].max(1e-30);
            }
            let Some(step) = solve(damped, jtr.clone()) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = params.iter().zip(&step).map(|(p, s)| p + s).collect();
            let trial_chi2 = chi2(&trial);
            if trial_chi2.is_finite() && trial_chi2 <= best {
                let rel_drop = (best - trial_chi2) / best.max(1e-300);
                let small_step = step
                    .iter()
                    .zip(&params)
                    .all(|(s, p)| s.abs() <= 1e-10 * (p.abs() + 1e-12));
                params = trial;
                best = trial_chi2;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if rel_drop < 1e-12 || small_step {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if converged || !accepted {
            converged = converged || (!accepted && best.is_finite());
            break;
        }
    }

    // Curvature at the optimum for the uncertainty estimate.
    let jac = jacobian(&model, x, &params);
    let mut jtj = vec![vec![0.0; k]; k];
    for i in 0..n {
        for a in 0..k {
            for b in a..k {
                jtj[a][b] += weights[i] * jac[i][a] * jac[i][b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            jtj[a][b] = jtj[b][a];
        }
    }
    let dof = n.saturating_sub(k).max(1) as f64;
    let scale = (best / dof).max(0.0);
    let uncertainties = match invert(&jtj) {
        Some(inv) => (0..k)
            .map(|a| (inv[a][a].max(0.0) * scale.max(1e-300)).sqrt())
            .collect(),
        None => vec![f64::NAN; k],
    };

    LeastSquaresFit {
        params,
        uncertainties,
        residual_norm: best.sqrt(),
        converged,
        iterations,
    }
}

pub(crate) struct PoissonFit {
    pub params: Vec<f64>,
    pub uncertainties: Vec<f64>,
    pub pearson_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Maximizes the Poisson likelihood of `counts[i] ~ Poisson(f(params, x_i))`
/// by damped Fisher scoring. The model must stay positive; callers enforce
/// that by parameterizing in log space.
pub(crate) fn poisson_mle<F>(model: F, x: &[f64], counts: &[f64], p0: &[f64]) -> PoissonFit
where
    F: Fn(&[f64], f64) -> f64,
{
    assert_eq!(x.len(), counts.len());
    let n = x.len();
    let k = p0.len();
    let mu_of = |p: &[f64]| -> Vec<f64> { x.iter().map(|&xi| model(p, xi).max(1e-300)).collect() };
    let loglik = |mu: &[f64]| -> f64 { mu.iter().zip(counts).map(|(&m, &c)| c * m.ln() - m).sum() };

    let mut params = p0.to_vec();
    let mut mu = mu_of(&params);
    let mut best = loglik(&mu);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..200 {
        iterations = iter + 1;
        let jac = jacobian(&model, x, &params);
        let mut fisher = vec![vec![0.0; k]; k];
        let mut grad = vec![0.0; k];
        for i in 0..n {
            let g = counts[i] / mu[i] - 1.0;
            let w = 1.0 / mu[i];
            for a in 0..k {
                grad[a] += jac[i][a] * g;
                for b in a..k {
                    fisher[a][b] += w * jac[i][a] * jac[i][b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                fisher[a][b] = fisher[b][a];
            }
        }

        let mut accepted = false;
        for _ in 0..25 {
            let mut damped = fisher.clone();
            for (a, row) in damped.iter_mut().enumerate() {
                row[a] += lambda * fisher[a][a].max(1e-30);
            }
            let Some(step) = solve(damped, grad.clone()) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = params.iter().zip(&step).map(|(p, s)| p + s).collect();
            let trial_mu = mu_of(&trial);
            let trial_ll = loglik(&trial_mu);
            if trial_ll.is_finite() && trial_ll >= best {
                let rel_gain = (trial_ll - best).abs() / (best.abs() + 1.0);
                params = trial;
                mu = trial_mu;
                best = trial_ll;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if rel_gain < 1e-9 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if converged || !accepted {
            converged = converged || (!accepted && best.is_finite());
            break;
        }
    }

    let jac = jacobian(&model, x, &params);
    let mut fisher = vec![vec![0.0; k]; k];
    for i in 0..n {
        let w = 1.0 / mu[i];
        for a in 0..k {
            for b in a..k {
                fisher[a][b] += w * jac[i][a] * jac[i][b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            fisher[a][b] = fisher[b][a];
        }
    }
    let uncertainties = match invert(&fisher) {
        Some(inv) => (0..k).map(|a| inv[a][a].max(0.0).sqrt()).collect(),
        None => vec![f64::NAN; k],
    };
    let pearson: f64 = mu
        .iter()
        .zip(counts)
        .map(|(&m, &c)| (c - m) * (c - m) / m.max(1e-300))
        .sum();

    PoissonFit {
        params,
        uncertainties,
        pearson_norm: pearson.sqrt(),
        converged,
        iterations,
    }
}
