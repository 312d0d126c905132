//! Confidence-thresholded pseudo-labels for target batches.

use alloc::{format, vec::Vec};

use crate::infoloss::PredictionBatch;
use crate::kernels::one_hot;
use crate::matrix::Matrix;
use crate::model::argmax;
use crate::{Error, Result};

/// Rows whose top probability is strictly above the threshold, with their
/// argmax classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub indices: Vec<usize>,
    pub classes: Vec<usize>,
    pub labels: Matrix,
}

impl PseudoLabels {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn select_pseudo_labels(probs: &PredictionBatch, gamma0: f64) -> Result<PseudoLabels> {
    if !(gamma0 > 0.0 && gamma0 < 1.0) {
        return Err(Error::Config(format!("gamma0 {gamma0} must lie in (0, 1)")));
    }
    let mut indices = Vec::new();
    let mut classes = Vec::new();
    for (i, row) in probs.probs().row_iter().enumerate() {
        let k = argmax(row);
        if row[k] > gamma0 {
            indices.push(i);
            classes.push(k);
        }
    }
    let labels = one_hot(&classes, probs.class_count())?;
    Ok(PseudoLabels {
        indices,
        classes,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(rows: &[[f64; 3]]) -> PredictionBatch {
        PredictionBatch::new(Matrix::from_rows(rows)).unwrap()
    }

    fn random_batch(seed: u64, n: usize, c: usize) -> PredictionBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(n, c);
        for i in 0..n {
            let sharp = rng.random_range(0.5..30.0);
            let logits: Vec<f64> = (0..c)
                .map(|_| rng.random_range(-1.0..1.0) * sharp)
                .collect();
            let max = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let s: f64 = e.iter().sum();
            for j in 0..c {
                m[(i, j)] = e[j] / s;
            }
        }
        PredictionBatch::new(m).unwrap()
    }

    #[test]
    fn threshold_095_example() {
        let p = batch(&[[0.96, 0.03, 0.01], [0.05, 0.90, 0.05], [0.01, 0.01, 0.98]]);
        let s = select_pseudo_labels(&p, 0.95).unwrap();
        assert_eq!(s.indices, vec![0, 2]);
        assert_eq!(s.classes, vec![0, 2]);
        assert_eq!(
            s.labels,
            Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        );
    }

    #[test]
    fn threshold_is_strict() {
        let p = batch(&[[0.5, 0.25, 0.25]]);
        assert!(select_pseudo_labels(&p, 0.5).unwrap().is_empty());
    }

    #[test]
    fn uniform_selects_nothing() {
        let p = PredictionBatch::new(Matrix::from_fn(5, 4, |_, _| 0.25)).unwrap();
        assert!(select_pseudo_labels(&p, 0.26).unwrap().is_empty());
    }

    #[test]
    fn invalid_threshold() {
        let p = batch(&[[0.5, 0.25, 0.25]]);
        assert!(select_pseudo_labels(&p, 0.0).is_err());
        assert!(select_pseudo_labels(&p, 1.0).is_err());
    }

    #[test]
    fn matches_row_scan() {
        let p = random_batch(3, 64, 4);
        let s = select_pseudo_labels(&p, 0.8).unwrap();
        let mut expected = Vec::new();
        for i in 0..64 {
            let row = p.probs().row(i);
            let mut best = 0;
            for j in 1..4 {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if row[best] > 0.8 {
                expected.push((i, best));
            }
        }
        let got: Vec<(usize, usize)> = s
            .indices
            .iter()
            .copied()
            .zip(s.classes.iter().copied())
            .collect();
        assert_eq!(got, expected);
    }

    proptest! {
        #[test]
        fn monotone_in_threshold(seed in any::<u64>(), lo in 0.01f64..0.98, delta in 0.0f64..0.5) {
            let p = random_batch(seed, 20, 3);
            let hi = (lo + delta).min(0.99);
            let a = select_pseudo_labels(&p, lo).unwrap();
            let b = select_pseudo_labels(&p, hi).unwrap();
            prop_assert!(b.indices.iter().all(|i| a.indices.contains(i)));
            for (i, c) in a.indices.iter().zip(&a.classes) {
                let row = p.probs().row(*i);
                prop_assert!(row.iter().all(|v| *v <= row[*c]));
            }
        }

        #[test]
        fn tiny_threshold_selects_all(seed in any::<u64>()) {
            let p = random_batch(seed, 10, 3);
            prop_assert_eq!(select_pseudo_labels(&p, 1e-9).unwrap().len(), 10);
        }
    }
}
