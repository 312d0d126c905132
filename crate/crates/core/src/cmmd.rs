//! Empirical conditional maximum mean discrepancy between two labelled
//! feature batches, and its gradient with respect to both batches.
//!
//! With label Gram matrices `L`, their ridged versions `L̃ = L + λI` and
//! feature Gram matrices `K`, the estimator is
//!
//! ```text
//! Tr(G_s·K_s) + Tr(G_t·K_t) − 2·Tr(G_ts·K_st)
//! G_s  = L̃_s⁻¹ L_s  L̃_s⁻¹
//! G_t  = L̃_t⁻¹ L_t  L̃_t⁻¹
//! G_ts = L̃_t⁻¹ L_ts L̃_s⁻¹
//! ```
//!
//! which is `‖Ĉ_s − Ĉ_t‖²` for the empirical conditional embedding operators
//! `Ĉ = Ψ·L̃⁻¹·Φᵀ`. The `G` matrices depend on labels only, so they are
//! constants for the feature gradient.

use alloc::format;

use crate::kernels::{
    gram_gradient_with, gram_with, label_gram, FeatureKernel, KernelSpec, LabeledBatch,
};
use crate::matrix::{trace_product, Cholesky, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct CmmdResult {
    pub value: f64,
    pub grad_zs: Matrix,
    pub grad_zt: Matrix,
    pub g_s: Matrix,
    pub g_t: Matrix,
    pub g_ts: Matrix,
}

impl CmmdResult {
    /// Zero loss and zero gradients, used when no target sample survives
    /// pseudo-label filtering.
    pub fn skipped(n_s: usize, n_t: usize, dim: usize) -> Self {
        Self {
            value: 0.0,
            grad_zs: Matrix::zeros(n_s, dim),
            grad_zt: Matrix::zeros(n_t, dim),
            g_s: Matrix::zeros(n_s, n_s),
            g_t: Matrix::zeros(n_t, n_t),
            g_ts: Matrix::zeros(n_t, n_s),
        }
    }
}

pub fn cmmd_loss(
    source: &LabeledBatch,
    target: &LabeledBatch,
    spec: &KernelSpec,
) -> Result<CmmdResult> {
    cmmd_loss_with(source, target, spec, spec.reg_lambda())
}

/// CMMD with an arbitrary feature kernel.
pub fn cmmd_loss_with<K: FeatureKernel + ?Sized>(
    source: &LabeledBatch,
    target: &LabeledBatch,
    kernel: &K,
    reg_lambda: f64,
) -> Result<CmmdResult> {
    if source.class_count() != target.class_count() {
        return Err(Error::shape(
            "cmmd_loss",
            format!(
                "class counts {} vs {}",
                source.class_count(),
                target.class_count()
            ),
        ));
    }
    if source.z().cols() != target.z().cols() {
        return Err(Error::shape(
            "cmmd_loss",
            format!(
                "feature dims {} vs {}",
                source.z().cols(),
                target.z().cols()
            ),
        ));
    }
    if !(reg_lambda > 0.0) {
        return Err(Error::Config(format!(
            "reg_lambda {reg_lambda} must be positive"
        )));
    }
    let (zs, zt) = (source.z(), target.z());

    let l_s = label_gram(source.y(), source.y())?;
    let l_t = label_gram(target.y(), target.y())?;
    let l_ts = label_gram(target.y(), source.y())?;
    let chol_s = ridged(&l_s, reg_lambda)?;
    let chol_t = ridged(&l_t, reg_lambda)?;

    let g_s = sandwich(&chol_s, &l_s, &chol_s)?;
    let g_t = sandwich(&chol_t, &l_t, &chol_t)?;
    let g_ts = sandwich(&chol_t, &l_ts, &chol_s)?;

    let k_s = gram_with(zs, zs, kernel)?;
    let k_t = gram_with(zt, zt, kernel)?;
    let k_st = gram_with(zs, zt, kernel)?;

    let value = trace_product(&g_s, &k_s)? + trace_product(&g_t, &k_t)?
        - 2.0 * trace_product(&g_ts, &k_st)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("cmmd value"));
    }

    // Tr(G·K(z, z)) depends on z through both arguments; with a symmetric
    // kernel that is the one-sided gradient with coefficients G + Gᵀ.
    let mut grad_zs = gram_gradient_with(zs, zs, kernel, &g_s.add(&g_s.transpose())?)?;
    grad_zs.add_scaled(
        &gram_gradient_with(zs, zt, kernel, &g_ts.transpose())?,
        -2.0,
    )?;
    let mut grad_zt = gram_gradient_with(zt, zt, kernel, &g_t.add(&g_t.transpose())?)?;
    grad_zt.add_scaled(&gram_gradient_with(zt, zs, kernel, &g_ts)?, -2.0)?;
    if !grad_zs.is_finite() || !grad_zt.is_finite() {
        return Err(Error::NonFinite("cmmd gradient"));
    }

    Ok(CmmdResult {
        value,
        grad_zs,
        grad_zt,
        g_s,
        g_t,
        g_ts,
    })
}

fn ridged(l: &Matrix, reg_lambda: f64) -> Result<Cholesky> {
    let mut lt = l.clone();
    lt.add_diagonal(reg_lambda);
    Cholesky::new(&lt)
}

/// `A⁻¹·M·B⁻¹` for symmetric `A`, `B` given by their factorizations.
fn sandwich(left: &Cholesky, m: &Matrix, right: &Cholesky) -> Result<Matrix> {
    let x = left.solve(m)?;
    // X·B⁻¹ = (B⁻¹·Xᵀ)ᵀ
    Ok(right.solve(&x.transpose())?.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gaussian_mixture_kernel, LinearKernel};
    use alloc::vec::Vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, c: usize) -> LabeledBatch {
        let z = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.5..1.5));
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        LabeledBatch::from_classes(z, &classes, c).unwrap()
    }

    #[test]
    fn identical_batches_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = KernelSpec::default();
        let b = random_batch(&mut rng, 10, 3, 3);
        let r = cmmd_loss(&b, &b, &spec).unwrap();
        assert!(r.value.abs() < 1e-10, "{}", r.value);
        assert!(r.grad_zs.max_abs() < 1e-8);
        assert!(r.grad_zt.max_abs() < 1e-8);
    }

    #[test]
    fn single_sample_reduction() {
        let spec = KernelSpec::with_reg_lambda(0.1).unwrap();
        let zs = [0.3, -0.2];
        let zt = [1.0, 0.4];
        let s = LabeledBatch::from_classes(Matrix::from_rows(&[zs]), &[1], 2).unwrap();
        let t = LabeledBatch::from_classes(Matrix::from_rows(&[zt]), &[1], 2).unwrap();
        let k = |a: &[f64], b: &[f64]| gaussian_mixture_kernel(a, b, &spec).unwrap();
        let expected = (k(&zs, &zs) + k(&zt, &zt) - 2.0 * k(&zs, &zt)) / (1.1f64 * 1.1);
        let r = cmmd_loss(&s, &t, &spec).unwrap();
        assert!((r.value - expected).abs() < 1e-14);
        let r = cmmd_loss(&s, &s, &spec).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn shape_errors() {
        let spec = KernelSpec::default();
        let a = LabeledBatch::from_classes(Matrix::zeros(2, 2), &[0, 1], 2).unwrap();
        let b = LabeledBatch::from_classes(Matrix::zeros(2, 2), &[0, 1], 3).unwrap();
        let c = LabeledBatch::from_classes(Matrix::zeros(2, 3), &[0, 1], 2).unwrap();
        assert!(matches!(cmmd_loss(&a, &b, &spec), Err(Error::Shape { .. })));
        assert!(matches!(cmmd_loss(&a, &c, &spec), Err(Error::Shape { .. })));
    }

    #[test]
    fn skipped_has_matching_shapes() {
        let r = CmmdResult::skipped(4, 0, 3);
        assert_eq!(r.grad_zs.shape(), (4, 3));
        assert_eq!(r.grad_zt.shape(), (0, 3));
        assert_eq!(r.value, 0.0);
    }

    // Explicit operator Ĉ = Zᵀ·L̃⁻¹·Y (d×c) with a Gauss–Jordan inverse, so
    // the check shares nothing with the Cholesky/trace path.
    fn gauss_jordan_inverse(a: &Matrix) -> Matrix {
        let n = a.rows();
        let mut m = a.clone();
        let mut inv = Matrix::identity(n);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))
                .unwrap();
            for k in 0..n {
                let (x, y) = (m[(col, k)], m[(pivot, k)]);
                m[(col, k)] = y;
                m[(pivot, k)] = x;
                let (x, y) = (inv[(col, k)], inv[(pivot, k)]);
                inv[(col, k)] = y;
                inv[(pivot, k)] = x;
            }
            let p = m[(col, col)];
            for k in 0..n {
                m[(col, k)] /= p;
                inv[(col, k)] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = m[(r, col)];
                    for k in 0..n {
                        m[(r, k)] -= f * m[(col, k)];
                        inv[(r, k)] -= f * inv[(col, k)];
                    }
                }
            }
        }
        inv
    }

    fn explicit_operator(b: &LabeledBatch, lambda: f64) -> Matrix {
        let n = b.len();
        let mut lt = Matrix::from_fn(n, n, |i, j| {
            (0..b.class_count())
                .map(|k| b.y()[(i, k)] * b.y()[(j, k)])
                .sum()
        });
        lt.add_diagonal(lambda);
        let inv = gauss_jordan_inverse(&lt);
        let (d, c) = (b.z().cols(), b.class_count());
        Matrix::from_fn(d, c, |p, q| {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += b.z()[(i, p)] * inv[(i, j)] * b.y()[(j, q)];
                }
            }
            s
        })
    }

    #[test]
    fn linear_kernel_matches_explicit_feature_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..100 {
            let (ns, nt) = (rng.random_range(1..=8), rng.random_range(1..=8));
            let d = rng.random_range(1..=4);
            let c = rng.random_range(1..=3);
            let lambda = 0.05;
            let s = random_batch(&mut rng, ns, d, c);
            let t = random_batch(&mut rng, nt, d, c);
            let cs = explicit_operator(&s, lambda);
            let ct = explicit_operator(&t, lambda);
            let frob: f64 = cs
                .as_slice()
                .iter()
                .zip(ct.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let r = cmmd_loss_with(&s, &t, &LinearKernel, lambda).unwrap();
            assert!(
                (r.value - frob).abs() <= 1e-10 * frob.max(1e-300),
                "{} vs {}",
                r.value,
                frob
            );
        }
    }

    fn fd_max_rel_err(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = KernelSpec::default();
        let (ns, nt, d, c) = (
            rng.random_range(2..7),
            rng.random_range(2..7),
            rng.random_range(1..4),
            3,
        );
        let s = random_batch(&mut rng, ns, d, c);
        let t = random_batch(&mut rng, nt, d, c);
        let r = cmmd_loss(&s, &t, &spec).unwrap();
        let value = |zs: &Matrix, zt: &Matrix| {
            let s2 = LabeledBatch::new(zs.clone(), s.y().clone()).unwrap();
            let t2 = LabeledBatch::new(zt.clone(), t.y().clone()).unwrap();
            cmmd_loss(&s2, &t2, &spec).unwrap().value
        };
        let h = 1e-5;
        let floor = 1e-3 * r.grad_zs.max_abs().max(r.grad_zt.max_abs());
        let mut worst: f64 = 0.0;
        for (which, analytic) in [(0, &r.grad_zs), (1, &r.grad_zt)] {
            for i in 0..analytic.rows() {
                for k in 0..d {
                    let (mut zp, mut zm) = if which == 0 {
                        (s.z().clone(), s.z().clone())
                    } else {
                        (t.z().clone(), t.z().clone())
                    };
                    zp[(i, k)] += h;
                    zm[(i, k)] -= h;
                    let numeric = if which == 0 {
                        (value(&zp, t.z()) - value(&zm, t.z())) / (2.0 * h)
                    } else {
                        (value(s.z(), &zp) - value(s.z(), &zm)) / (2.0 * h)
                    };
                    let a = analytic[(i, k)];
                    worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
                }
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..50 {
            let e = fd_max_rel_err(seed);
            assert!(e < 1e-5, "seed {seed}: {e}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn nonnegative_and_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = KernelSpec::default();
            let (ns, nt, d, c) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..4), rng.random_range(1..4));
            let s = random_batch(&mut rng, ns, d, c);
            let t = random_batch(&mut rng, nt, d, c);
            let st = cmmd_loss(&s, &t, &spec).unwrap();
            let ts = cmmd_loss(&t, &s, &spec).unwrap();
            prop_assert!(st.value >= -1e-9);
            prop_assert!((st.value - ts.value).abs() < 1e-12);
            prop_assert_eq!(st.grad_zs.shape(), (ns, d));
            prop_assert_eq!(st.grad_zt.shape(), (nt, d));
        }
    }
}
