//! Kernel hyperparameters by maximizing the log marginal likelihood.
//!
//! Parameters are optimized in log space, ordered
//! `[ln σf, ln ℓ1, ..., ln ℓd, ln σn]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{build_gram, GpError, Kernel, JITTER};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MAX_ITER: usize = 200;
/// Largest log-space move per iteration.
const MAX_STEP: f64 = 2.0;

/// Box constraints, each `(min, max)` in natural units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperBounds {
    pub sigma_f: (f64, f64),
    pub length_scale: (f64, f64),
    pub sigma_n: (f64, f64),
}

impl Default for HyperBounds {
    fn default() -> Self {
        Self { sigma_f: (1e-3, 1e2), length_scale: (1e-2, 1e2), sigma_n: (1e-4, 1e1) }
    }
}

impl HyperBounds {
    fn clamp(&self, theta: &mut [f64]) {
        let d = theta.len() - 2;
        let ln = |(a, b): (f64, f64)| (a.ln(), b.ln());
        let (lo, hi) = ln(self.sigma_f);
        theta[0] = theta[0].clamp(lo, hi);
        let (lo, hi) = ln(self.length_scale);
        for v in &mut theta[1..=d] {
            *v = v.clamp(lo, hi);
        }
        let (lo, hi) = ln(self.sigma_n);
        theta[d + 1] = theta[d + 1].clamp(lo, hi);
    }
}

fn to_theta(k: &Kernel) -> Vec<f64> {
    std::iter::once(k.sigma_f.ln())
        .chain(k.length_scales.iter().map(|l| l.ln()))
        .chain(std::iter::once(k.sigma_n.ln()))
        .collect()
}

fn from_theta(theta: &[f64]) -> Kernel {
    let d = theta.len() - 2;
    Kernel {
        sigma_f: theta[0].exp(),
        length_scales: theta[1..=d].iter().map(|v| v.exp()).collect(),
        sigma_n: theta[d + 1].exp(),
    }
}

fn check_data(rows: &[Vec<f64>], y: &[f64], k: &Kernel) -> Result<(), GpError> {
    if rows.len() != y.len() {
        return Err(GpError::LengthMismatch(rows.len(), y.len()));
    }
    if rows.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite);
    }
    k.validate()
}

/// Noisy Gram matrix `K + (σn² + jitter) I` and its Cholesky decomposition.
fn noisy_cholesky(rows: &[Vec<f64>], k: &Kernel) -> Result<(DMatrix<f64>, nalgebra::Cholesky<f64, nalgebra::Dyn>), GpError> {
    let kf = build_gram(k, rows)?;
    let mut ky = kf.clone();
    let diag = k.diagonal_term();
    for i in 0..ky.nrows() {
        ky[(i, i)] += diag;
    }
    if ky.iter().any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite);
    }
    let chol = nalgebra::Cholesky::new(ky).ok_or(GpError::CholeskyFailure)?;
    Ok((kf, chol))
}

/// `-½ yᵀ Ky⁻¹ y - ½ ln|Ky| - (n/2) ln 2π`.
pub fn log_marginal_likelihood(rows: &[Vec<f64>], y: &[f64], k: &Kernel) -> Result<f64, GpError> {
    check_data(rows, y, k)?;
    let (_, chol) = noisy_cholesky(rows, k)?;
    Ok(lml_from_cholesky(&chol, y))
}

fn lml_from_cholesky(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>, y: &[f64]) -> f64 {
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let half_logdet: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    -0.5 * yv.dot(&alpha) - half_logdet - 0.5 * y.len() as f64 * LN_2PI
}

/// Log marginal likelihood and its gradient with respect to the log
/// parameters `[ln σf, ln ℓ1..ℓd, ln σn]`.
pub fn lml_with_gradient(rows: &[Vec<f64>], y: &[f64], k: &Kernel) -> Result<(f64, Vec<f64>), GpError> {
    check_data(rows, y, k)?;
    let (kf, chol) = noisy_cholesky(rows, k)?;
    let lml = lml_from_cholesky(&chol, y);
    let alpha = chol.solve(&DVector::from_column_slice(y));
    let ky_inv = chol.inverse();
    let n = y.len();
    let d = k.dim();

    // ∂LML/∂θ = ½ tr((ααᵀ - Ky⁻¹) ∂Ky/∂θ); W below is that bracket.
    let w = |i: usize, j: usize| alpha[i] * alpha[j] - ky_inv[(i, j)];
    let mut grad = vec![0.0; d + 2];
    let sf2 = k.signal_variance();
    let sn2 = k.sigma_n * k.sigma_n;
    for i in 0..n {
        let wii = w(i, i);
        // diagonal: ∂/∂ln σf of (σf² + jitter·σf²), ∂/∂ln σn of σn²
        grad[0] += 0.5 * wii * 2.0 * (kf[(i, i)] + JITTER * sf2);
        grad[d + 1] += 0.5 * wii * 2.0 * sn2;
        for j in 0..i {
            let wij = w(i, j);
            let kij = kf[(i, j)];
            // off-diagonal terms appear twice in the trace
            grad[0] += wij * 2.0 * kij;
            for c in 0..d {
                let diff = (rows[i][c] - rows[j][c]) / k.length_scales[c];
                grad[1 + c] += wij * kij * diff * diff;
            }
        }
    }
    if !lml.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(GpError::NonFinite);
    }
    Ok((lml, grad))
}

/// Maximizes the log marginal likelihood from `init` with a bounded
/// quasi-Newton ascent in log-parameter space. Only improving steps are
/// accepted, so the result never scores below `init`.
pub fn fit_hyperparams(rows: &[Vec<f64>], y: &[f64], init: &Kernel, bounds: &HyperBounds) -> Result<Kernel, GpError> {
    if rows.len() < 5 {
        return Err(GpError::TooFewPoints { need: 5, got: rows.len() });
    }
    let dim = rows[0].len();
    if init.dim() != dim {
        return Err(GpError::DimensionMismatch { expected: dim, got: init.dim() });
    }
    let mut theta = to_theta(init);
    let (mut f, mut g) = lml_with_gradient(rows, y, init)?;
    let p = theta.len();
    // inverse Hessian approximation of the negated objective
    let mut h = DMatrix::<f64>::identity(p, p);

    for _ in 0..MAX_ITER {
        let gv = DVector::from_column_slice(&g);
        if gv.amax() < 1e-6 * f.abs().max(1.0) {
            break;
        }
        let mut dir = &h * &gv;
        if dir.dot(&gv) <= 0.0 {
            h = DMatrix::identity(p, p);
            dir = gv.clone();
        }
        let scale = dir.amax();
        if scale > MAX_STEP {
            dir *= MAX_STEP / scale;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut cand: Vec<f64> = theta.iter().zip(dir.iter()).map(|(a, b)| a + t * b).collect();
            bounds.clamp(&mut cand);
            let step_size = cand.iter().zip(&theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if step_size < 1e-12 {
                break;
            }
            // A failed factorization at the candidate counts as a rejected step.
            if let Ok((fc, gc)) = lml_with_gradient(rows, y, &from_theta(&cand)) {
                if fc > f {
                    accepted = Some((cand, fc, gc));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((cand, fc, gc)) = accepted else { break };

        let s = DVector::from_iterator(p, cand.iter().zip(&theta).map(|(a, b)| a - b));
        // gradient change of the minimized objective (-LML)
        let yk = DVector::from_iterator(p, g.iter().zip(&gc).map(|(a, b)| a - b));
        let sy = s.dot(&yk);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(p, p);
            let left = &i - &s * yk.transpose() * rho;
            let right = &i - &yk * s.transpose() * rho;
            h = left * &h * right + &s * s.transpose() * rho;
        }
        let improvement = fc - f;
        theta = cand;
        f = fc;
        g = gc;
        if improvement < 1e-10 * f.abs().max(1.0) {
            break;
        }
    }
    Ok(from_theta(&theta))
}
