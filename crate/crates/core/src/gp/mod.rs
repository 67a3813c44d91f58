//! Gaussian-process skill classifier.
//!
//! Classification is sign-thresholded GP regression on ±1 labels
//! (expert = +1, novice = -1). The predictive mean and variance are
//!
//! ```text
//! mean = k*ᵀ (K + σn² I)⁻¹ y
//! var  = k** - k*ᵀ (K + σn² I)⁻¹ k*
//! ```
//!
//! evaluated through the Cholesky factor `L` of `K + σn² I`. The model can
//! grow one observation at a time by bordering `L`, which costs O(n²) and
//! gives the same factor as refactorizing from scratch.

mod hyper;
mod persist;

pub use hyper::{fit_hyperparams, lml_with_gradient, log_marginal_likelihood, HyperBounds};
pub use persist::{load_model, model_from_json, model_to_json, save_model, ModelDocument, MODEL_FORMAT, MODEL_VERSION};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureVector, Normalizer};
use crate::SkillLabel;

/// Relative diagonal jitter added before factorization.
pub const JITTER: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("Cholesky factorization failed (matrix not positive definite)")]
    CholeskyFailure,
    #[error("label {0} is not +1 or -1")]
    InvalidLabel(f64),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("non-finite value encountered")]
    NonFinite,
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("{0} inputs but {1} labels")]
    LengthMismatch(usize, usize),
}

/// ARD squared-exponential kernel with Gaussian observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub sigma_f: f64,
    pub length_scales: Vec<f64>,
    pub sigma_n: f64,
}

impl Kernel {
    pub fn new(sigma_f: f64, length_scales: Vec<f64>, sigma_n: f64) -> Result<Self, GpError> {
        let k = Self { sigma_f, length_scales, sigma_n };
        k.validate()?;
        Ok(k)
    }

    /// σf = 1, ℓ = 1, σn = 0.1 in standardized feature units.
    pub fn default_for(dim: usize) -> Self {
        Self { sigma_f: 1.0, length_scales: vec![1.0; dim], sigma_n: 0.1 }
    }

    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }

    pub fn validate(&self) -> Result<(), GpError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.sigma_f) || !ok(self.sigma_n) || !self.length_scales.iter().all(|&l| ok(l)) {
            return Err(GpError::InvalidKernel(format!("{self:?}")));
        }
        if self.length_scales.is_empty() {
            return Err(GpError::InvalidKernel("no length scales".into()));
        }
        Ok(())
    }

    pub fn signal_variance(&self) -> f64 {
        self.sigma_f * self.sigma_f
    }

    /// Diagonal added to the Gram matrix: noise variance plus jitter.
    pub fn diagonal_term(&self) -> f64 {
        self.sigma_n * self.sigma_n + JITTER * self.signal_variance()
    }

    /// Kernel value without dimension checks.
    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((x, y), l) in a.iter().zip(b).zip(&self.length_scales) {
            let d = (x - y) / l;
            s += d * d;
        }
        self.signal_variance() * (-0.5 * s).exp()
    }
}

pub fn kernel_eval(k: &Kernel, a: &[f64], b: &[f64]) -> Result<f64, GpError> {
    for v in [a, b] {
        if v.len() != k.dim() {
            return Err(GpError::DimensionMismatch { expected: k.dim(), got: v.len() });
        }
    }
    Ok(k.eval(a, b))
}

/// Gram matrix of `rows` under `k` (without the noise diagonal).
pub fn build_gram(k: &Kernel, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, GpError> {
    if rows.is_empty() {
        return Err(GpError::EmptyInput);
    }
    if let Some(r) = rows.iter().find(|r| r.len() != k.dim()) {
        return Err(GpError::DimensionMismatch { expected: k.dim(), got: r.len() });
    }
    let n = rows.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        g[(i, i)] = k.eval(&rows[i], &rows[i]);
        for j in 0..i {
            let v = k.eval(&rows[i], &rows[j]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// Solves `L z = b` in place for lower-triangular, column-major `L`.
///
/// Columns are eliminated in blocks so each pass over the trailing part of
/// `b` folds in `BLOCK` columns; this is the hot loop of prediction.
pub(crate) fn forward_substitute(l: &DMatrix<f64>, b: &mut [f64]) {
    const BLOCK: usize = 8;
    let n = b.len();
    let data = l.as_slice();
    let mut j = 0;
    while j + BLOCK <= n {
        let cols: [&[f64]; BLOCK] = std::array::from_fn(|k| &data[(j + k) * n..(j + k + 1) * n]);
        let mut z = [0.0; BLOCK];
        for k in 0..BLOCK {
            let mut v = b[j + k];
            for m in 0..k {
                v -= z[m] * cols[m][j + k];
            }
            z[k] = v / cols[k][j + k];
        }
        b[j..j + BLOCK].copy_from_slice(&z);
        let r = j + BLOCK;
        let tail = &mut b[r..];
        let len = tail.len();
        let c: [&[f64]; BLOCK] = std::array::from_fn(|k| &cols[k][r..r + len]);
        for i in 0..len {
            let mut acc = 0.0;
            for k in 0..BLOCK {
                acc += z[k] * c[k][i];
            }
            tail[i] -= acc;
        }
        j += BLOCK;
    }
    for j in j..n {
        let c = &data[j * n..(j + 1) * n];
        let zj = b[j] / c[j];
        b[j] = zj;
        for (bi, lij) in b[j + 1..].iter_mut().zip(&c[j + 1..]) {
            *bi -= zj * lij;
        }
    }
}

/// Solves `Lᵀ z = b` in place.
pub(crate) fn back_substitute_transposed(l: &DMatrix<f64>, b: &mut [f64]) {
    let n = b.len();
    let data = l.as_slice();
    for j in (0..n).rev() {
        let col = &data[j * n..(j + 1) * n];
        let dot: f64 = col[j + 1..].iter().zip(&b[j + 1..]).map(|(a, c)| a * c).sum();
        b[j] = (b[j] - dot) / col[j];
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
    pub label: SkillLabel,
    /// Predictive std over σf, clamped to [0, 1]; 0 means fully certain.
    pub uncertainty: f64,
}

/// A trained GP over standardized features.
#[derive(Debug, Clone)]
pub struct GpModel {
    dim: usize,
    /// Row-major n×d training inputs.
    inputs: Vec<f64>,
    targets: Vec<f64>,
    kernel: Kernel,
    chol: DMatrix<f64>,
    alpha: Vec<f64>,
    normalizer: Normalizer,
}

fn check_labels(y: &[f64]) -> Result<(), GpError> {
    match y.iter().find(|&&v| v != 1.0 && v != -1.0) {
        Some(&bad) => Err(GpError::InvalidLabel(bad)),
        None => Ok(()),
    }
}

/// Cholesky factor of `K + (σn² + jitter) I`.
pub(crate) fn factorize(k: &Kernel, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, GpError> {
    let mut g = build_gram(k, rows)?;
    let diag = k.diagonal_term();
    for i in 0..g.nrows() {
        g[(i, i)] += diag;
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite);
    }
    let chol = nalgebra::Cholesky::new(g).ok_or(GpError::CholeskyFailure)?;
    Ok(chol.unpack())
}

/// Fits the model to `rows` (already standardized) with ±1 `labels`.
pub fn train(rows: &[Vec<f64>], labels: &[f64], kernel: &Kernel, normalizer: Normalizer) -> Result<GpModel, GpError> {
    kernel.validate()?;
    if rows.len() != labels.len() {
        return Err(GpError::LengthMismatch(rows.len(), labels.len()));
    }
    check_labels(labels)?;
    if normalizer.dim() != kernel.dim() {
        return Err(GpError::DimensionMismatch { expected: kernel.dim(), got: normalizer.dim() });
    }
    let chol = factorize(kernel, rows)?;
    let mut alpha = labels.to_vec();
    forward_substitute(&chol, &mut alpha);
    back_substitute_transposed(&chol, &mut alpha);
    Ok(GpModel {
        dim: kernel.dim(),
        inputs: rows.iter().flatten().copied().collect(),
        targets: labels.to_vec(),
        kernel: kernel.clone(),
        chol,
        alpha,
        normalizer,
    })
}

impl GpModel {
    /// A model with no observations; predictions revert to the prior.
    pub fn empty(kernel: &Kernel, normalizer: Normalizer) -> Result<Self, GpError> {
        kernel.validate()?;
        if normalizer.dim() != kernel.dim() {
            return Err(GpError::DimensionMismatch { expected: kernel.dim(), got: normalizer.dim() });
        }
        Ok(Self {
            dim: kernel.dim(),
            inputs: Vec::new(),
            targets: Vec::new(),
            kernel: kernel.clone(),
            chol: DMatrix::zeros(0, 0),
            alpha: Vec::new(),
            normalizer,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Lower-triangular Cholesky factor of `K + σn² I`.
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn inputs(&self) -> impl Iterator<Item = &[f64]> {
        self.inputs.chunks_exact(self.dim.max(1))
    }

    fn cross_covariance(&self, x: &[f64]) -> Vec<f64> {
        self.inputs().map(|xi| self.kernel.eval(x, xi)).collect()
    }

    /// Predicts at a standardized input.
    pub fn predict(&self, x_star: &[f64]) -> Result<Prediction, GpError> {
        if x_star.len() != self.dim {
            return Err(GpError::DimensionMismatch { expected: self.dim, got: x_star.len() });
        }
        let mut v = self.cross_covariance(x_star);
        let mean: f64 = v.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        forward_substitute(&self.chol, &mut v);
        let prior = self.kernel.eval(x_star, x_star);
        let variance = (prior - v.iter().map(|a| a * a).sum::<f64>()).max(0.0);
        let uncertainty = (variance.sqrt() / self.kernel.sigma_f).clamp(0.0, 1.0);
        Ok(Prediction { mean, variance, label: SkillLabel::from_score(mean), uncertainty })
    }

    /// Standardizes raw features with the model's normalizer, then predicts.
    pub fn predict_features(&self, f: &FeatureVector) -> Result<Prediction, GpError> {
        self.predict(&self.normalizer.apply(&f.to_array()))
    }

    /// Returns a new model with one more observation, extending the Cholesky
    /// factor by a bordered row.
    pub fn update_incremental(&self, x_new: &[f64], y_new: f64) -> Result<GpModel, GpError> {
        if x_new.len() != self.dim {
            return Err(GpError::DimensionMismatch { expected: self.dim, got: x_new.len() });
        }
        check_labels(&[y_new])?;
        let n = self.len();
        let mut row = self.cross_covariance(x_new);
        forward_substitute(&self.chol, &mut row);
        let d2 = self.kernel.eval(x_new, x_new) + self.kernel.diagonal_term() - row.iter().map(|v| v * v).sum::<f64>();
        if d2.is_nan() || d2 <= 0.0 || d2.is_infinite() {
            return Err(GpError::CholeskyFailure);
        }
        let mut chol = DMatrix::zeros(n + 1, n + 1);
        chol.view_mut((0, 0), (n, n)).copy_from(&self.chol);
        for (j, v) in row.iter().enumerate() {
            chol[(n, j)] = *v;
        }
        chol[(n, n)] = d2.sqrt();

        let mut targets = self.targets.clone();
        targets.push(y_new);
        let mut alpha = targets.clone();
        forward_substitute(&chol, &mut alpha);
        back_substitute_transposed(&chol, &mut alpha);

        let mut inputs = self.inputs.clone();
        inputs.extend_from_slice(x_new);
        Ok(GpModel {
            dim: self.dim,
            inputs,
            targets,
            kernel: self.kernel.clone(),
            chol,
            alpha,
            normalizer: self.normalizer.clone(),
        })
    }

    pub(crate) fn rows(&self) -> Vec<Vec<f64>> {
        self.inputs().map(|r| r.to_vec()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<f64>, Kernel) {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let labels: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let kernel = Kernel::new(
            rng.random_range(0.5..2.0),
            (0..d).map(|_| rng.random_range(0.5..2.0)).collect(),
            rng.random_range(0.1..1.0),
        )
        .unwrap();
        (rows, labels, kernel)
    }

    /// Dense LU inverse of the noisy Gram matrix.
    fn dense_inverse(k: &Kernel, rows: &[Vec<f64>]) -> DMatrix<f64> {
        let n = rows.len();
        let g = DMatrix::from_fn(n, n, |i, j| k.eval(&rows[i], &rows[j])) + DMatrix::identity(n, n) * k.diagonal_term();
        g.lu().try_inverse().unwrap()
    }

    fn dense_predict(k: &Kernel, rows: &[Vec<f64>], y: &[f64], x: &[f64]) -> (f64, f64) {
        let inv = dense_inverse(k, rows);
        let ks = DVector::from_iterator(rows.len(), rows.iter().map(|r| k.eval(x, r)));
        let yv = DVector::from_column_slice(y);
        let mean = (ks.transpose() * &inv * yv)[0];
        let var = k.eval(x, x) - (ks.transpose() * &inv * &ks)[0];
        (mean, var)
    }

    #[test]
    fn kernel_examples() {
        let k = Kernel::new(1.0, vec![1.0], 0.1).unwrap();
        assert_eq!(kernel_eval(&k, &[0.3], &[0.3]).unwrap(), 1.0);
        assert!((kernel_eval(&k, &[0.0], &[1.0]).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        assert!((kernel_eval(&k, &[0.0], &[1.0]).unwrap() - 0.60653).abs() < 1e-5);
        assert_eq!(kernel_eval(&k, &[0.0, 1.0], &[1.0]), Err(GpError::DimensionMismatch { expected: 1, got: 2 }));
        let k2 = Kernel::new(2.0, vec![1.0], 0.1).unwrap();
        assert_eq!(kernel_eval(&k2, &[5.0], &[5.0]).unwrap(), 4.0);
        assert!(Kernel::new(1.0, vec![0.0], 0.1).is_err());
        assert!(Kernel::new(1.0, vec![1.0], -0.1).is_err());
    }

    #[test]
    fn gram_examples() {
        let k = Kernel::new(1.5, vec![1.0, 2.0], 0.1).unwrap();
        assert_eq!(build_gram(&k, &[vec![0.0, 0.0]]).unwrap()[(0, 0)], 2.25);
        assert_eq!(build_gram(&k, &[]), Err(GpError::EmptyInput));
        let rows = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let g = build_gram(&k, &rows).unwrap();
        assert_eq!(g.row(0), g.row(2));
        assert_eq!(g.column(0), g.column(2));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (rows, _, k) = random_problem(&mut rng, 5, 3);
        let g = build_gram(&k, &rows).unwrap();
        assert_eq!(g, g.transpose());
        assert!(nalgebra::SymmetricEigen::new(g).eigenvalues.min() >= -1e-10);
    }

    #[test]
    fn one_point_alpha() {
        let k = Kernel::new(1.0, vec![1.0], 1e-12).unwrap();
        let m = train(&[vec![0.0]], &[1.0], &k, Normalizer::identity(1)).unwrap();
        assert!((m.alpha()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_labels_and_lengths() {
        let k = Kernel::default_for(1);
        assert_eq!(train(&[vec![0.0]], &[0.5], &k, Normalizer::identity(1)).unwrap_err(), GpError::InvalidLabel(0.5));
        assert_eq!(train(&[vec![0.0]], &[], &k, Normalizer::identity(1)).unwrap_err(), GpError::LengthMismatch(1, 0));
        assert!(matches!(train(&[vec![0.0]], &[1.0], &k, Normalizer::identity(2)), Err(GpError::DimensionMismatch { .. })));
    }

    #[test]
    fn duplicate_points_without_noise_fail() {
        let k = Kernel { sigma_f: 1.0, length_scales: vec![1.0], sigma_n: 1e-300 };
        // jitter alone keeps an exact duplicate factorizable
        assert!(train(&[vec![0.0], vec![0.0]], &[1.0, -1.0], &k, Normalizer::identity(1)).is_ok());
        let bad = Kernel { sigma_f: 1.0, length_scales: vec![1.0], sigma_n: f64::NAN };
        assert!(train(&[vec![0.0]], &[1.0], &bad, Normalizer::identity(1)).is_err());
        // an indefinite Gram matrix is reported, not propagated as NaN
        let huge = Kernel { sigma_f: 1e200, length_scales: vec![1.0], sigma_n: 0.1 };
        assert!(train(&[vec![0.0], vec![1.0]], &[1.0, -1.0], &huge, Normalizer::identity(1)).is_err());
    }

    #[test]
    fn trained_model_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (rows, y, k) = random_problem(&mut rng, 20, 3);
        let m = train(&rows, &y, &k, Normalizer::identity(3)).unwrap();
        let mut ky = build_gram(&k, &rows).unwrap();
        for i in 0..20 {
            ky[(i, i)] += k.diagonal_term();
        }
        let l = m.cholesky_factor();
        assert!((l * l.transpose() - &ky).norm() / ky.norm() < 1e-8);
        let resid = &ky * DVector::from_column_slice(m.alpha()) - DVector::from_column_slice(&y);
        assert!(resid.amax() < 1e-8);
        let inv_alpha = dense_inverse(&k, &rows) * DVector::from_column_slice(&y);
        for (a, b) in m.alpha().iter().zip(inv_alpha.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn interpolates_training_points() {
        let k = Kernel::new(1.0, vec![1.0], 1e-6).unwrap();
        let rows = vec![vec![0.0], vec![3.0]];
        let m = train(&rows, &[1.0, -1.0], &k, Normalizer::identity(1)).unwrap();
        let p = m.predict(&[0.0]).unwrap();
        assert!((p.mean - 1.0).abs() < 1e-6);
        assert!(p.variance < 1e-9);
        assert!(p.uncertainty < 1e-4);
        assert_eq!(p.label, SkillLabel::Expert);
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let k = Kernel::new(1.3, vec![1.0, 1.0], 0.1).unwrap();
        let m = train(&[vec![0.0, 0.0], vec![1.0, 0.0]], &[1.0, 1.0], &k, Normalizer::identity(2)).unwrap();
        let p = m.predict(&[25.0, 0.0]).unwrap();
        assert!(p.mean.abs() < 1e-12);
        assert!((p.variance - 1.69).abs() < 1e-12);
        assert_eq!(p.uncertainty, 1.0);
    }

    #[test]
    fn antisymmetric_pair_midpoint() {
        let k = Kernel::new(1.0, vec![1.0], 0.1).unwrap();
        let rows = vec![vec![0.0], vec![1.0]];
        let m = train(&rows, &[1.0, -1.0], &k, Normalizer::identity(1)).unwrap();
        let p = m.predict(&[0.5]).unwrap();
        assert!(p.mean.abs() < 1e-12);
        assert_eq!(p.label, SkillLabel::Expert);
        // explicit 2x2 inverse
        let a = 1.0 + k.diagonal_term();
        let b = (-0.5f64).exp();
        let det = a * a - b * b;
        let ks = (-0.125f64).exp();
        let var = 1.0 - (ks * ks * (a - b) * 2.0) / det;
        assert!((p.variance - var).abs() < 1e-12);
    }

    #[test]
    fn empty_model_update_equals_single_train() {
        let k = Kernel::new(1.2, vec![0.7, 1.1], 0.2).unwrap();
        let e = GpModel::empty(&k, Normalizer::identity(2)).unwrap();
        assert_eq!(e.predict(&[0.0, 0.0]).unwrap().uncertainty, 1.0);
        let up = e.update_incremental(&[0.3, -0.2], -1.0).unwrap();
        let batch = train(&[vec![0.3, -0.2]], &[-1.0], &k, Normalizer::identity(2)).unwrap();
        assert!((up.cholesky_factor() - batch.cholesky_factor()).amax() < 1e-12);
        assert!((up.alpha()[0] - batch.alpha()[0]).abs() < 1e-12);
    }

    #[test]
    fn incremental_matches_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (rows, y, k) = random_problem(&mut rng, 11, 3);
        let m10 = train(&rows[..10], &y[..10], &k, Normalizer::identity(3)).unwrap();
        let inc = m10.update_incremental(&rows[10], y[10]).unwrap();
        let batch = train(&rows, &y, &k, Normalizer::identity(3)).unwrap();
        assert!((inc.cholesky_factor() - batch.cholesky_factor()).amax() < 1e-8);
        for (a, b) in inc.alpha().iter().zip(batch.alpha()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert_eq!(inc.update_incremental(&rows[0], 0.0).unwrap_err(), GpError::InvalidLabel(0.0));
    }

    #[test]
    fn corrupted_update_reports_cholesky_failure() {
        let k = Kernel::default_for(1);
        let m = train(&[vec![0.0]], &[1.0], &k, Normalizer::identity(1)).unwrap();
        assert_eq!(m.update_incremental(&[f64::NAN], 1.0).unwrap_err(), GpError::CholeskyFailure);
        // exact duplicates stay factorizable through the jitter term
        assert!(m.update_incremental(&[0.0], 1.0).is_ok());
    }

    #[test]
    fn sequential_updates_match_batch_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (rows, y, k) = random_problem(&mut rng, 50, 4);
        let mut m = GpModel::empty(&k, Normalizer::identity(4)).unwrap();
        for (r, l) in rows.iter().zip(&y) {
            m = m.update_incremental(r, *l).unwrap();
        }
        let batch = train(&rows, &y, &k, Normalizer::identity(4)).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (a, b) = (m.predict(&x).unwrap(), batch.predict(&x).unwrap());
            assert!((a.mean - b.mean).abs() < 1e-7);
            assert!((a.variance - b.variance).abs() < 1e-7);
        }
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..30 {
            let n = rng.random_range(1..=50);
            let d = rng.random_range(1..=5);
            let (rows, y, k) = random_problem(&mut rng, n, d);
            let m = train(&rows, &y, &k, Normalizer::identity(d)).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let p = m.predict(&x).unwrap();
            let (mean, var) = dense_predict(&k, &rows, &y, &x);
            assert!((p.mean - mean).abs() < 1e-9);
            assert!((p.variance - var.max(0.0)).abs() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prediction_properties(seed in any::<u64>(), n in 1usize..25, d in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (rows, y, k) = random_problem(&mut rng, n, d);
            let m = train(&rows, &y, &k, Normalizer::identity(d)).unwrap();

            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            perm.rotate_left(n / 3);
            let prow: Vec<_> = perm.iter().map(|&i| rows[i].clone()).collect();
            let py: Vec<_> = perm.iter().map(|&i| y[i]).collect();
            let mp = train(&prow, &py, &k, Normalizer::identity(d)).unwrap();

            let neg: Vec<_> = y.iter().map(|v| -v).collect();
            let mn = train(&rows, &neg, &k, Normalizer::identity(d)).unwrap();

            let extra: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let grown = m.update_incremental(&extra, 1.0).unwrap();

            for _ in 0..5 {
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
                let p = m.predict(&x).unwrap();
                prop_assert!(p.variance >= 0.0 && p.variance <= k.eval(&x, &x));
                prop_assert!((0.0..=1.0).contains(&p.uncertainty));
                prop_assert_eq!(p.label == SkillLabel::Expert, p.mean >= 0.0);

                let q = mp.predict(&x).unwrap();
                prop_assert!((p.mean - q.mean).abs() < 1e-10);
                prop_assert!((p.variance - q.variance).abs() < 1e-10);

                let r = mn.predict(&x).unwrap();
                prop_assert!((p.mean + r.mean).abs() < 1e-12);
                prop_assert_eq!(p.variance, r.variance);

                let g = grown.predict(&x).unwrap();
                prop_assert!(g.variance <= p.variance + 1e-9);
            }
        }
    }
}
