//! Feature and label kernels, Gram matrices and kernel gradients.

use alloc::{format, vec::Vec};

use crate::matrix::{dot, squared_distance, Matrix};
use crate::{Error, Result};

/// A differentiable kernel on feature vectors.
pub trait FeatureKernel {
    fn eval(&self, x: &[f64], y: &[f64]) -> f64;

    /// Adds `scale · ∂k(x, y)/∂x` into `out`.
    fn accumulate_grad(&self, x: &[f64], y: &[f64], scale: f64, out: &mut [f64]);
}

/// Mixture of Gaussian kernels `Σₘ wₘ·exp(−‖x−y‖²/(2σₘ²))` together with
/// the ridge `λ` added to label Gram matrices before inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    bandwidths: Vec<f64>,
    weights: Vec<f64>,
    reg_lambda: f64,
}

impl KernelSpec {
    /// Bandwidths used for the conditional discrepancy in every experiment.
    pub const DEFAULT_BANDWIDTHS: [f64; 5] = [0.1, 1.0, 10.0, 100.0, 1000.0];
    pub const DEFAULT_REG_LAMBDA: f64 = 1e-3;

    pub fn new(bandwidths: Vec<f64>, weights: Vec<f64>, reg_lambda: f64) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(Error::Config("kernel needs at least one bandwidth".into()));
        }
        if let Some(s) = bandwidths.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!(
                "bandwidth {s} must be positive and finite"
            )));
        }
        if weights.len() != bandwidths.len() {
            return Err(Error::Config(format!(
                "{} weights for {} bandwidths",
                weights.len(),
                bandwidths.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Config("kernel weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "kernel weights sum to {total}, expected 1"
            )));
        }
        if !(reg_lambda > 0.0) || !reg_lambda.is_finite() {
            return Err(Error::Config(format!(
                "reg_lambda {reg_lambda} must be positive"
            )));
        }
        Ok(Self {
            bandwidths,
            weights,
            reg_lambda,
        })
    }

    /// Equal-weight mixture over the given bandwidths.
    pub fn uniform(bandwidths: Vec<f64>, reg_lambda: f64) -> Result<Self> {
        let w = 1.0 / bandwidths.len().max(1) as f64;
        let weights = bandwidths.iter().map(|_| w).collect();
        Self::new(bandwidths, weights, reg_lambda)
    }

    pub fn with_reg_lambda(reg_lambda: f64) -> Result<Self> {
        Self::uniform(Self::DEFAULT_BANDWIDTHS.to_vec(), reg_lambda)
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn reg_lambda(&self) -> f64 {
        self.reg_lambda
    }

    #[inline]
    fn eval_sq(&self, d2: f64) -> f64 {
        self.bandwidths
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| w * libm::exp(-d2 / (2.0 * s * s)))
            .sum()
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::with_reg_lambda(Self::DEFAULT_REG_LAMBDA).expect("default kernel is valid")
    }
}

impl FeatureKernel for KernelSpec {
    fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        self.eval_sq(squared_distance(x, y))
    }

    fn accumulate_grad(&self, x: &[f64], y: &[f64], scale: f64, out: &mut [f64]) {
        let d2 = squared_distance(x, y);
        // ∂/∂x exp(−‖x−y‖²/2σ²) = exp(·)·(y−x)/σ²
        let c: f64 = self
            .bandwidths
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| w * libm::exp(-d2 / (2.0 * s * s)) / (s * s))
            .sum();
        let c = c * scale;
        for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
            *o += c * (yi - xi);
        }
    }
}

/// `k(x, y) = ⟨x, y⟩`; explicit feature map is the identity.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearKernel;

impl FeatureKernel for LinearKernel {
    fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        dot(x, y)
    }

    fn accumulate_grad(&self, _x: &[f64], y: &[f64], scale: f64, out: &mut [f64]) {
        for (o, yi) in out.iter_mut().zip(y) {
            *o += scale * yi;
        }
    }
}

/// A mini-batch of features with one-hot labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    z: Matrix,
    y: Matrix,
}

impl LabeledBatch {
    pub fn new(z: Matrix, y: Matrix) -> Result<Self> {
        if z.rows() != y.rows() {
            return Err(Error::shape(
                "LabeledBatch",
                format!("{} feature rows, {} label rows", z.rows(), y.rows()),
            ));
        }
        if z.rows() == 0 {
            return Err(Error::Data("labeled batch is empty".into()));
        }
        for (i, row) in y.row_iter().enumerate() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::Data(format!("label row {i} is not one-hot")));
            }
        }
        Ok(Self { z, y })
    }

    /// Builds the one-hot label matrix from class indices.
    pub fn from_classes(z: Matrix, classes: &[usize], class_count: usize) -> Result<Self> {
        Self::new(z, one_hot(classes, class_count)?)
    }

    pub fn z(&self) -> &Matrix {
        &self.z
    }

    pub fn y(&self) -> &Matrix {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows() == 0
    }

    pub fn class_count(&self) -> usize {
        self.y.cols()
    }
}

pub fn one_hot(classes: &[usize], class_count: usize) -> Result<Matrix> {
    let mut y = Matrix::zeros(classes.len(), class_count);
    for (i, &c) in classes.iter().enumerate() {
        if c >= class_count {
            return Err(Error::Data(format!(
                "class {c} out of range for {class_count} classes"
            )));
        }
        y[(i, c)] = 1.0;
    }
    Ok(y)
}

pub fn gaussian_mixture_kernel(x: &[f64], y: &[f64], spec: &KernelSpec) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(
            "gaussian_mixture_kernel",
            format!("dim {} vs {}", x.len(), y.len()),
        ));
    }
    Ok(spec.eval(x, y))
}

pub fn gram(a: &Matrix, b: &Matrix, spec: &KernelSpec) -> Result<Matrix> {
    gram_with(a, b, spec)
}

/// `Gᵢⱼ = k(aᵢ, bⱼ)` for any feature kernel.
pub fn gram_with<K: FeatureKernel + ?Sized>(a: &Matrix, b: &Matrix, kernel: &K) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "gram",
            format!("feature dims {} vs {}", a.cols(), b.cols()),
        ));
    }
    Ok(Matrix::from_fn(a.rows(), b.rows(), |i, j| {
        kernel.eval(a.row(i), b.row(j))
    }))
}

/// Delta kernel on one-hot labels: `yaᵢ · ybⱼ`.
pub fn label_gram(ya: &Matrix, yb: &Matrix) -> Result<Matrix> {
    if ya.cols() != yb.cols() {
        return Err(Error::shape(
            "label_gram",
            format!("class counts {} vs {}", ya.cols(), yb.cols()),
        ));
    }
    Ok(Matrix::from_fn(ya.rows(), yb.rows(), |i, j| {
        dot(ya.row(i), yb.row(j))
    }))
}

pub fn gram_gradient(a: &Matrix, b: &Matrix, spec: &KernelSpec, coeff: &Matrix) -> Result<Matrix> {
    gram_gradient_with(a, b, spec, coeff)
}

/// `∂[Σᵢⱼ coeffᵢⱼ·k(aᵢ, bⱼ)]/∂a` with `b` held fixed.
pub fn gram_gradient_with<K: FeatureKernel + ?Sized>(
    a: &Matrix,
    b: &Matrix,
    kernel: &K,
    coeff: &Matrix,
) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "gram_gradient",
            format!("feature dims {} vs {}", a.cols(), b.cols()),
        ));
    }
    if coeff.shape() != (a.rows(), b.rows()) {
        return Err(Error::shape(
            "gram_gradient",
            format!(
                "coeff {}x{}, gram {}x{}",
                coeff.rows(),
                coeff.cols(),
                a.rows(),
                b.rows()
            ),
        ));
    }
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let ai = a.row(i);
        let mut acc = alloc::vec![0.0; a.cols()];
        for j in 0..b.rows() {
            let c = coeff[(i, j)];
            if c != 0.0 {
                kernel.accumulate_grad(ai, b.row(j), c, &mut acc);
            }
        }
        out.row_mut(i).copy_from_slice(&acc);
    }
    Ok(out)
}
