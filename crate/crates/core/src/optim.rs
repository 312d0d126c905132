//! Adam with separate learning rates for the feature extractor and the
//! classifier head.

use crate::model::{MlpModel, ParamGrads};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LearningRates {
    pub feature: f64,
    pub classifier: f64,
}

impl LearningRates {
    pub fn uniform(lr: f64) -> Self {
        Self {
            feature: lr,
            classifier: lr,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ParamGrads,
    v: ParamGrads,
}

impl AdamState {
    pub fn new(model: &MlpModel) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: ParamGrads::zeros_like(model),
            v: ParamGrads::zeros_like(model),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `model` in place.
    pub fn step(
        &mut self,
        model: &mut MlpModel,
        grads: &ParamGrads,
        lr: LearningRates,
    ) -> Result<()> {
        let same_shape = |a: &ParamGrads, b: &ParamGrads| {
            a.layers.len() == b.layers.len()
                && a.iter().zip(b.iter()).all(|(x, y)| {
                    x.weight.shape() == y.weight.shape() && x.bias.len() == y.bias.len()
                })
        };
        let layout = ParamGrads::zeros_like(model);
        if !same_shape(&layout, grads) || !same_shape(&layout, &self.m) {
            return Err(Error::shape(
                "adam_step",
                "gradient or optimizer state does not match the model",
            ));
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);

        let update = |param: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], rate: f64| {
            for (((p, &g), m), v) in param.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= rate * m_hat / (libm::sqrt(v_hat) + eps);
            }
        };
        let moments = self.m.layers.iter_mut().zip(self.v.layers.iter_mut());
        for ((dense, g), (m, v)) in model
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(moments)
        {
            update(
                dense.weight.as_mut_slice(),
                g.weight.as_slice(),
                m.weight.as_mut_slice(),
                v.weight.as_mut_slice(),
                lr.feature,
            );
            update(
                &mut dense.bias,
                &g.bias,
                &mut m.bias,
                &mut v.bias,
                lr.feature,
            );
        }
        let head = model.classifier_mut();
        let (g, m, v) = (
            &grads.classifier,
            &mut self.m.classifier,
            &mut self.v.classifier,
        );
        update(
            head.weight.as_mut_slice(),
            g.weight.as_slice(),
            m.weight.as_mut_slice(),
            v.weight.as_mut_slice(),
            lr.classifier,
        );
        update(
            &mut head.bias,
            &g.bias,
            &mut m.bias,
            &mut v.bias,
            lr.classifier,
        );
        Ok(())
    }
}

/// Convenience wrapper matching the functional form: returns the updated
/// model and state.
pub fn adam_step(
    mut model: MlpModel,
    grads: &ParamGrads,
    mut state: AdamState,
    lr: LearningRates,
) -> Result<(MlpModel, AdamState)> {
    state.step(&mut model, grads, lr)?;
    Ok((model, state))
}
