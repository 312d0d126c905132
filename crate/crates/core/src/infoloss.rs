//! Mutual-information loss on target predictions.
//!
//! `L_MI = (1/n)·Σᵢ H(pᵢ) − H(p̄)` where `p̄` is the batch-mean prediction.
//! Minimising it sharpens each prediction while keeping the predicted class
//! marginal spread out. The partial variant replaces `H(p̄)` by
//! `min{H(p̄), γ₁}` so the marginal term stops acting once it reaches the cap.
//!
//! Entropies are in nats. Probabilities are floored at [`PROB_FLOOR`] inside
//! logarithms, and gradients use the floored value.

use alloc::{format, vec, vec::Vec};

use crate::matrix::Matrix;
use crate::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-9;

/// Rows of predicted class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBatch {
    probs: Matrix,
}

impl PredictionBatch {
    pub fn new(probs: Matrix) -> Result<Self> {
        for (i, row) in probs.row_iter().enumerate() {
            check_simplex(row).map_err(|e| Error::Domain(format!("row {i}: {e}")))?;
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn into_inner(self) -> Matrix {
        self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }

    pub fn class_count(&self) -> usize {
        self.probs.cols()
    }

    /// Column means `p̄`.
    pub fn marginal(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut mean = vec![0.0; self.class_count()];
        for row in self.probs.row_iter() {
            for (m, p) in mean.iter_mut().zip(row) {
                *m += p;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

fn check_simplex(p: &[f64]) -> core::result::Result<(), alloc::string::String> {
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(format!("entry {v} is not a probability"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(format!("probabilities sum to {s}"));
    }
    Ok(())
}

#[inline]
fn xlogx(p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * libm::log(p.max(PROB_FLOOR))
    }
}

pub fn entropy(p: &[f64]) -> Result<f64> {
    check_simplex(p).map_err(Error::Domain)?;
    Ok(entropy_unchecked(p))
}

fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter().map(|&v| xlogx(v)).sum::<f64>()
}

/// The pieces both loss variants share.
struct Terms {
    conditional: f64,
    marginal: f64,
    grad_conditional: Matrix,
    grad_marginal: Matrix,
}

fn terms(batch: &PredictionBatch) -> Result<Terms> {
    if batch.is_empty() {
        return Err(Error::Data("prediction batch is empty".into()));
    }
    let (n, c) = batch.probs.shape();
    let inv_n = 1.0 / n as f64;
    let mut conditional = 0.0;
    let mut grad_conditional = Matrix::zeros(n, c);
    for (i, row) in batch.probs.row_iter().enumerate() {
        conditional += entropy_unchecked(row);
        for (g, &p) in grad_conditional.row_mut(i).iter_mut().zip(row) {
            *g = (-libm::log(p.max(PROB_FLOOR)) - 1.0) * inv_n;
        }
    }
    conditional *= inv_n;

    let mean = batch.marginal();
    let marginal = entropy_unchecked(&mean);
    // ∂(−H(p̄))/∂pᵢⱼ = (ln p̄ⱼ + 1)/n, identical for every row.
    let row_grad: Vec<f64> = mean
        .iter()
        .map(|&m| (libm::log(m.max(PROB_FLOOR)) + 1.0) * inv_n)
        .collect();
    let mut grad_marginal = Matrix::zeros(n, c);
    for i in 0..n {
        grad_marginal.row_mut(i).copy_from_slice(&row_grad);
    }
    Ok(Terms {
        conditional,
        marginal,
        grad_conditional,
        grad_marginal,
    })
}

/// Returns the loss and its gradient with respect to the probabilities.
pub fn mi_loss(batch: &PredictionBatch) -> Result<(f64, Matrix)> {
    let t = terms(batch)?;
    let grad = t.grad_conditional.add(&t.grad_marginal)?;
    Ok((t.conditional - t.marginal, grad))
}

/// Conditional-entropy term only (the marginal-entropy ablation).
pub fn conditional_entropy_loss(batch: &PredictionBatch) -> Result<(f64, Matrix)> {
    let t = terms(batch)?;
    Ok((t.conditional, t.grad_conditional))
}

/// `(1/n)·Σ H(pᵢ) − min{H(p̄), γ₁}`. At `H(p̄) ≥ γ₁` the marginal term is
/// constant and contributes no gradient.
pub fn partial_mi_loss(batch: &PredictionBatch, gamma1: f64) -> Result<(f64, Matrix)> {
    if !(gamma1 > 0.0) {
        return Err(Error::Config(format!("gamma1 {gamma1} must be positive")));
    }
    let t = terms(batch)?;
    if t.marginal >= gamma1 {
        Ok((t.conditional - gamma1, t.grad_conditional))
    } else {
        let grad = t.grad_conditional.add(&t.grad_marginal)?;
        Ok((t.conditional - t.marginal, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = core::f64::consts::LN_2;

    fn uniform(n: usize, c: usize) -> PredictionBatch {
        PredictionBatch::new(Matrix::from_fn(n, c, |_, _| 1.0 / c as f64)).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, c: usize) -> PredictionBatch {
        let mut m = Matrix::from_fn(n, c, |_, _| rng.random_range(0.05..1.0));
        for i in 0..n {
            let s: f64 = m.row(i).iter().sum();
            m.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        PredictionBatch::new(m).unwrap()
    }

    // Two-pass evaluation straight from the definition.
    fn direct_mi(p: &Matrix) -> f64 {
        let (n, c) = p.shape();
        let mut cond = 0.0;
        for i in 0..n {
            for j in 0..c {
                cond -= p[(i, j)] * p[(i, j)].ln();
            }
        }
        cond /= n as f64;
        let mut marg = 0.0;
        for j in 0..c {
            let m: f64 = (0..n).map(|i| p[(i, j)]).sum::<f64>() / n as f64;
            marg -= m * m.ln();
        }
        cond - marg
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.25; 4]).unwrap() - 1.3862943611198906).abs() < 1e-15);
        assert!((entropy(&[0.5, 0.25, 0.25]).unwrap() - 1.5 * LN2).abs() < 1e-15);
        assert!(matches!(entropy(&[0.5, 0.6]), Err(Error::Domain(_))));
        assert!(matches!(entropy(&[1.5, -0.5]), Err(Error::Domain(_))));
    }

    #[test]
    fn batch_rejects_off_simplex() {
        assert!(PredictionBatch::new(Matrix::from_rows(&[[0.5, 0.4]])).is_err());
        assert!(PredictionBatch::new(Matrix::from_rows(&[[f64::NAN, 1.0]])).is_err());
        assert!(mi_loss(&PredictionBatch::new(Matrix::zeros(0, 3)).unwrap()).is_err());
    }

    #[test]
    fn uniform_rows_give_zero() {
        let (v, _) = mi_loss(&uniform(6, 4)).unwrap();
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn balanced_one_hot_gives_minus_ln_c() {
        let c = 5;
        let p = PredictionBatch::new(Matrix::from_fn(
            10,
            c,
            |i, j| if i % c == j { 1.0 } else { 0.0 },
        ))
        .unwrap();
        let (v, _) = mi_loss(&p).unwrap();
        assert!((v + (c as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn partial_branches() {
        let (v, _) = partial_mi_loss(&uniform(4, 4), 1.5).unwrap();
        assert!(v.abs() < 1e-9);
        let b = uniform(4, 8);
        let (v, g) = partial_mi_loss(&b, 1.5).unwrap();
        assert!((v - 0.5794415416798359).abs() < 1e-9);
        let (_, cond_grad) = conditional_entropy_loss(&b).unwrap();
        assert_eq!(g, cond_grad);
        assert!(partial_mi_loss(&b, 0.0).is_err());
    }

    #[test]
    fn partial_continuous_at_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = random_batch(&mut rng, 7, 4);
        let h = entropy(&b.marginal()).unwrap();
        let eps = 1e-12;
        let (below, _) = partial_mi_loss(&b, h + eps).unwrap();
        let (above, _) = partial_mi_loss(&b, h - eps).unwrap();
        let (at, _) = partial_mi_loss(&b, h).unwrap();
        assert!((below - above).abs() < 1e-9);
        assert!((below - at).abs() < 1e-9);
    }

    #[test]
    fn infinite_cap_is_mi() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = random_batch(&mut rng, 9, 3);
        let (a, ga) = mi_loss(&b).unwrap();
        let (p, gp) = partial_mi_loss(&b, f64::INFINITY).unwrap();
        assert!((a - p).abs() < 1e-12);
        assert_eq!(ga, gp);
    }

    // Directional derivative along eⱼ − e_last keeps the row on the simplex.
    fn tangent_fd_err(
        b: &PredictionBatch,
        loss: impl Fn(&PredictionBatch) -> (f64, Matrix),
    ) -> f64 {
        let (_, g) = loss(b);
        let (n, c) = b.probs().shape();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in 0..c - 1 {
                let mut plus = b.probs().clone();
                plus[(i, j)] += h;
                plus[(i, c - 1)] -= h;
                let mut minus = b.probs().clone();
                minus[(i, j)] -= h;
                minus[(i, c - 1)] += h;
                let fp = loss(&PredictionBatch::new(plus).unwrap()).0;
                let fm = loss(&PredictionBatch::new(minus).unwrap()).0;
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = g[(i, j)] - g[(i, c - 1)];
                scale = scale.max(analytic.abs());
                pairs.push((analytic, numeric));
            }
        }
        for (a, n) in pairs {
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale));
        }
        worst
    }

    #[test]
    fn gradients_match_tangent_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let b = random_batch(&mut rng, 6, 4);
            let (v, _) = mi_loss(&b).unwrap();
            assert!((v - direct_mi(b.probs())).abs() < 1e-12);
            let e = tangent_fd_err(&b, |b| mi_loss(b).unwrap());
            assert!(e < 1e-6, "mi {e}");
            let e = tangent_fd_err(&b, |b| partial_mi_loss(b, 0.5).unwrap());
            assert!(e < 1e-6, "partial {e}");
            let e = tangent_fd_err(&b, |b| conditional_entropy_loss(b).unwrap());
            assert!(e < 1e-6, "conditional {e}");
        }
    }

    proptest! {
        #[test]
        fn mi_bounded_and_permutation_invariant(seed in any::<u64>(), n in 1usize..12, c in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = random_batch(&mut rng, n, c);
            let (v, _) = mi_loss(&b).unwrap();
            let lnc = (c as f64).ln();
            prop_assert!(v >= -lnc - 1e-12 && v <= lnc + 1e-12);

            let rows: Vec<usize> = (0..n).rev().collect();
            let cols: Vec<usize> = (0..c).map(|j| (j + 1) % c).collect();
            let permuted = Matrix::from_fn(n, c, |i, j| b.probs()[(rows[i], cols[j])]);
            let (vp, _) = mi_loss(&PredictionBatch::new(permuted).unwrap()).unwrap();
            prop_assert!((v - vp).abs() < 1e-12);
        }
    }
}
