//! Central finite-difference checks of every hand-written gradient.
//!
//! Each suite builds a small random instance from a seed, evaluates the
//! analytic gradient once and compares it entry by entry against
//! `(f(x + h·e) − f(x − h·e)) / 2h`. Errors are reported relative to
//! `max(|analytic|, |numeric|, 1e-3·max|analytic|)` so entries that are
//! tiny compared to the rest of the gradient do not dominate.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cmmd::cmmd_loss;
use crate::infoloss::{mi_loss, partial_mi_loss, PredictionBatch};
use crate::kernels::{KernelSpec, LabeledBatch};
use crate::matrix::Matrix;
use crate::model::{softmax_rows, MlpModel};
use crate::trainer::{joint_loss_and_grads, Batch, TargetSelection, TrainConfig};
use crate::Result;

/// Default step for the central differences.
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GradCheckReport {
    pub name: &'static str,
    pub seed: u64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Relative error of one entry, with the denominator floored at `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compares two gradient vectors of equal length.
pub fn compare(
    name: &'static str,
    seed: u64,
    analytic: &[f64],
    numeric: &[f64],
) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut report = GradCheckReport {
        name,
        seed,
        checked: analytic.len(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    for (&a, &n) in analytic.iter().zip(numeric) {
        report.max_rel_error = report.max_rel_error.max(relative_error(a, n, floor));
        report.max_abs_error = report.max_abs_error.max((a - n).abs());
    }
    report
}

/// Central differences of `f` at `x` along every coordinate.
pub fn central_difference(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        scale * rng.sample::<f64, _>(StandardNormal)
    })
}

fn random_classes(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..c)).collect()
}

/// CMMD gradient with respect to both feature batches.
pub fn check_cmmd(seed: u64, spec: &KernelSpec) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_s, n_t, d, c) = (6, 5, 3, 3);
    let zs = normal_matrix(&mut rng, n_s, d, 1.0);
    let zt = normal_matrix(&mut rng, n_t, d, 1.0);
    let ys = random_classes(&mut rng, n_s, c);
    let yt = random_classes(&mut rng, n_t, c);

    let value = |zs: &[f64], zt: &[f64]| -> Result<f64> {
        let s = LabeledBatch::from_classes(Matrix::from_vec(n_s, d, zs.to_vec())?, &ys, c)?;
        let t = LabeledBatch::from_classes(Matrix::from_vec(n_t, d, zt.to_vec())?, &yt, c)?;
        Ok(cmmd_loss(&s, &t, spec)?.value)
    };
    let s = LabeledBatch::from_classes(zs.clone(), &ys, c)?;
    let t = LabeledBatch::from_classes(zt.clone(), &yt, c)?;
    let res = cmmd_loss(&s, &t, spec)?;

    let mut analytic = res.grad_zs.as_slice().to_vec();
    analytic.extend_from_slice(res.grad_zt.as_slice());
    let mut numeric = central_difference(|p| value(p, zt.as_slice()), zs.as_slice(), STEP)?;
    numeric.extend(central_difference(
        |p| value(zs.as_slice(), p),
        zt.as_slice(),
        STEP,
    )?);
    Ok(compare("cmmd", seed, &analytic, &numeric))
}

/// Random strictly positive prediction batch.
pub fn random_predictions(seed: u64, n: usize, c: usize) -> Result<PredictionBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PredictionBatch::new(softmax_rows(&normal_matrix(&mut rng, n, c, 1.5)))
}

/// MI gradient (or the partial variant when `gamma1` is given) along the
/// simplex tangents `e_j − e_last` of each row.
pub fn check_mi(seed: u64, gamma1: Option<f64>) -> Result<GradCheckReport> {
    let (n, c) = (6, 4);
    let batch = random_predictions(seed, n, c)?;
    let loss = |b: &PredictionBatch| match gamma1 {
        Some(g) => partial_mi_loss(b, g),
        None => mi_loss(b),
    };
    let (_, grad) = loss(&batch)?;
    let h = STEP;
    let mut analytic = Vec::with_capacity(n * (c - 1));
    let mut numeric = Vec::with_capacity(n * (c - 1));
    for i in 0..n {
        for j in 0..c - 1 {
            let shifted = |sign: f64| -> Result<f64> {
                let mut p = batch.probs().clone();
                p[(i, j)] += sign * h;
                p[(i, c - 1)] -= sign * h;
                Ok(loss(&PredictionBatch::new(p)?)?.0)
            };
            numeric.push((shifted(1.0)? - shifted(-1.0)?) / (2.0 * h));
            analytic.push(grad[(i, j)] - grad[(i, c - 1)]);
        }
    }
    Ok(compare(
        if gamma1.is_some() { "partial_mi" } else { "mi" },
        seed,
        &analytic,
        &numeric,
    ))
}

/// Gradient of the full joint objective with respect to every network
/// parameter, with the target labels held fixed.
pub fn check_composite(seed: u64, cfg: &TrainConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (input_dim, c, n_s, n_t) = (3, 3, 8, 7);
    let mut model = MlpModel::init(input_dim, &[5, 4], c, &mut rng)?;
    // Zero biases can put a hidden pre-activation exactly on the ReLU kink
    // when every unit feeding it is inactive.
    for layer in model.layers_mut() {
        layer
            .bias
            .iter_mut()
            .for_each(|b| *b = 0.1 * rng.sample::<f64, _>(StandardNormal));
    }
    let source = Batch {
        x: normal_matrix(&mut rng, n_s, input_dim, 1.5),
        classes: Some(random_classes(&mut rng, n_s, c)),
    };
    let target = Batch {
        x: normal_matrix(&mut rng, n_t, input_dim, 1.5),
        classes: None,
    };
    // Every other target row takes the current argmax as its label.
    let predictions = model.forward(&target.x)?.predictions();
    let indices: Vec<usize> = (0..n_t).step_by(2).collect();
    let classes = indices.iter().map(|&i| predictions[i]).collect();
    let selection = TargetSelection { indices, classes };
    let kernel = cfg.kernel()?;

    let (_, grads) = joint_loss_and_grads(&model, &source, &target, &selection, cfg, &kernel)?;
    let mut probe = model.clone();
    let numeric = central_difference(
        |theta| {
            probe.set_flat_params(theta)?;
            Ok(
                joint_loss_and_grads(&probe, &source, &target, &selection, cfg, &kernel)?
                    .0
                    .total,
            )
        },
        &model.flat_params(),
        STEP,
    )?;
    Ok(compare("composite", seed, &grads.flatten(), &numeric))
}
