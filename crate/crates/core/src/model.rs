//! Fully-connected feature extractor with a softmax classifier head.
//!
//! The backward pass takes two upstream gradients: one on the predicted
//! probabilities (cross-entropy, mutual information) and one injected directly
//! at the extractor output (the conditional discrepancy acts on features).

use alloc::{format, vec, vec::Vec};

use rand::Rng;

use crate::infoloss::{PredictionBatch, PROB_FLOOR};
use crate::matrix::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine map `x·W + b` followed by an activation. `weight` is `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::shape(
                "Dense::new",
                format!("bias {} for {} outputs", bias.len(), weight.cols()),
            ));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = libm::sqrt(6.0 / (inputs + outputs) as f64);
        let weight = Matrix::from_fn(inputs, outputs, |_, _| rng.random_range(-limit..limit));
        Self {
            weight,
            bias: vec![0.0; outputs],
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    fn pre_activation(&self, x: &Matrix) -> Result<Matrix> {
        let mut pre = matmul(x, &self.weight)?;
        for i in 0..pre.rows() {
            for (v, b) in pre.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(pre)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Dense>,
    classifier: Dense,
}

impl MlpModel {
    pub fn new(layers: Vec<Dense>, classifier: Dense) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::shape(
                    "MlpModel::new",
                    format!(
                        "layer emits {} but next expects {}",
                        pair[0].outputs(),
                        pair[1].inputs()
                    ),
                ));
            }
        }
        if let Some(last) = layers.last() {
            if last.outputs() != classifier.inputs() {
                return Err(Error::shape(
                    "MlpModel::new",
                    format!(
                        "features {} but classifier expects {}",
                        last.outputs(),
                        classifier.inputs()
                    ),
                ));
            }
        }
        if classifier.activation != Activation::Identity {
            return Err(Error::Config(
                "classifier must feed logits to softmax (identity activation)".into(),
            ));
        }
        Ok(Self { layers, classifier })
    }

    /// ReLU hidden layers of the given widths; the last hidden layer is the
    /// feature layer.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        class_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || class_count == 0 || hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let mut layers = Vec::with_capacity(hidden.len());
        let mut width = input_dim;
        for &h in hidden {
            layers.push(Dense::glorot(width, h, Activation::Relu, rng));
            width = h;
        }
        let classifier = Dense::glorot(width, class_count, Activation::Identity, rng);
        Self::new(layers, classifier)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn classifier(&self) -> &Dense {
        &self.classifier
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn classifier_mut(&mut self) -> &mut Dense {
        &mut self.classifier
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().unwrap_or(&self.classifier).inputs()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.inputs()
    }

    pub fn class_count(&self) -> usize {
        self.classifier.outputs()
    }

    /// Layer widths from input to logits, e.g. `[2, 64, 64, 5]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Dense::outputs));
        d.push(self.class_count());
        d
    }

    pub fn param_count(&self) -> usize {
        self.dense_iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }

    fn dense_iter(&self) -> impl Iterator<Item = &Dense> {
        self.layers.iter().chain(core::iter::once(&self.classifier))
    }

    fn dense_iter_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.layers
            .iter_mut()
            .chain(core::iter::once(&mut self.classifier))
    }

    /// All parameters in layer order, weights (row-major) before biases.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.dense_iter() {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::shape(
                "set_flat_params",
                format!(
                    "{} values for {} parameters",
                    params.len(),
                    self.param_count()
                ),
            ));
        }
        let mut off = 0;
        for l in self.dense_iter_mut() {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&params[off..off + w.len()]);
            off += w.len();
            let b = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + b]);
            off += b;
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardTrace> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "forward",
                format!(
                    "input has {} columns, model expects {}",
                    x.cols(),
                    self.input_dim()
                ),
            ));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let pre = layer.pre_activation(&h)?;
            let mut post = pre.clone();
            post.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = layer.activation.apply(*v));
            inputs.push(h);
            pre_activations.push(pre);
            h = post;
        }
        let logits = self.classifier.pre_activation(&h)?;
        let probs = softmax_rows(&logits);
        if !probs.is_finite() {
            return Err(Error::NonFinite("forward probabilities"));
        }
        Ok(ForwardTrace {
            inputs,
            pre_activations,
            features: h,
            logits,
            probs: PredictionBatch::new(probs)?,
        })
    }

    /// Parameter gradients given upstream gradients on the probabilities and
    /// on the features. Either may be all zeros.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_probs: &Matrix,
        grad_features: &Matrix,
    ) -> Result<ParamGrads> {
        let probs = trace.probs.probs();
        if grad_probs.shape() != probs.shape() {
            return Err(Error::shape(
                "backward",
                format!(
                    "grad_probs {:?} vs probs {:?}",
                    grad_probs.shape(),
                    probs.shape()
                ),
            ));
        }
        if grad_features.shape() != trace.features.shape() {
            return Err(Error::shape(
                "backward",
                format!(
                    "grad_features {:?} vs features {:?}",
                    grad_features.shape(),
                    trace.features.shape()
                ),
            ));
        }
        // Softmax Jacobian: ∂L/∂oⱼ = pⱼ·(gⱼ − Σₖ gₖ·pₖ).
        let mut grad_logits = Matrix::zeros(probs.rows(), probs.cols());
        for i in 0..probs.rows() {
            let (p, g) = (probs.row(i), grad_probs.row(i));
            let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
            for ((o, &pj), &gj) in grad_logits.row_mut(i).iter_mut().zip(p).zip(g) {
                *o = pj * (gj - inner);
            }
        }
        let classifier = dense_grad(&trace.features, &grad_logits)?;
        let mut grad_h = matmul_nt(&grad_logits, &self.classifier.weight)?;
        grad_h.add_scaled(grad_features, 1.0)?;

        let mut layers = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let pre = &trace.pre_activations[idx];
            for (g, &z) in grad_h.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                *g *= layer.activation.derivative(z);
            }
            layers.push(dense_grad(&trace.inputs[idx], &grad_h)?);
            if idx > 0 {
                grad_h = matmul_nt(&grad_h, &layer.weight)?;
            }
        }
        layers.reverse();
        Ok(ParamGrads { layers, classifier })
    }
}

fn dense_grad(input: &Matrix, grad_pre: &Matrix) -> Result<DenseGrad> {
    let weight = matmul_tn(input, grad_pre)?;
    let mut bias = vec![0.0; grad_pre.cols()];
    for row in grad_pre.row_iter() {
        for (b, g) in bias.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok(DenseGrad { weight, bias })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Cached activations from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    pub features: Matrix,
    pub logits: Matrix,
    pub probs: PredictionBatch,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    /// Argmax class per row, lowest index on ties.
    pub fn predictions(&self) -> Vec<usize> {
        self.probs.probs().row_iter().map(argmax).collect()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Mean negative log-likelihood of the labelled class and its gradient with
/// respect to the probabilities.
pub fn cross_entropy(probs: &PredictionBatch, labels: &Matrix) -> Result<(f64, Matrix)> {
    let p = probs.probs();
    if p.shape() != labels.shape() {
        return Err(Error::shape(
            "cross_entropy",
            format!("probs {:?} vs labels {:?}", p.shape(), labels.shape()),
        ));
    }
    if p.rows() == 0 {
        return Err(Error::Data("cross-entropy on an empty batch".into()));
    }
    let inv_n = 1.0 / p.rows() as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        for (j, (&pij, &yij)) in p.row(i).iter().zip(labels.row(i)).enumerate() {
            if yij != 0.0 {
                let q = pij.max(PROB_FLOOR);
                value -= yij * libm::log(q);
                grad[(i, j)] = -yij / q * inv_n;
            }
        }
    }
    Ok((value * inv_n, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Gradients laid out like [`MlpModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<DenseGrad>,
    pub classifier: DenseGrad,
}

impl ParamGrads {
    pub fn zeros_like(model: &MlpModel) -> Self {
        let z = |l: &Dense| DenseGrad {
            weight: Matrix::zeros(l.inputs(), l.outputs()),
            bias: vec![0.0; l.outputs()],
        };
        Self {
            layers: model.layers.iter().map(z).collect(),
            classifier: z(&model.classifier),
        }
    }

    pub(crate) fn iter(&self) -> impl Iterator<Item = &DenseGrad> {
        self.layers.iter().chain(core::iter::once(&self.classifier))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut DenseGrad> {
        self.layers
            .iter_mut()
            .chain(core::iter::once(&mut self.classifier))
    }

    pub fn add_assign(&mut self, other: &ParamGrads) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape(
                "ParamGrads::add_assign",
                "layer count differs",
            ));
        }
        for (a, b) in self.iter_mut().zip(other.iter()) {
            a.weight.add_scaled(&b.weight, 1.0)?;
            if a.bias.len() != b.bias.len() {
                return Err(Error::shape(
                    "ParamGrads::add_assign",
                    "bias length differs",
                ));
            }
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    /// Same ordering as [`MlpModel::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.iter() {
            out.extend_from_slice(g.weight.as_slice());
            out.extend_from_slice(&g.bias);
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, g| {
            g.bias
                .iter()
                .fold(m.max(g.weight.max_abs()), |m, v| m.max(v.abs()))
        })
    }
}
