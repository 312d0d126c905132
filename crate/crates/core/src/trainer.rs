//! Source pre-training followed by joint adaptation.
//!
//! Each adaptation step draws one source and one target mini-batch, labels
//! the confident target rows with the current classifier, and descends
//! `L_SC + λ₀·L_CMMD + λ₁·L_MI` (or the partial MI variant). Low-confidence
//! target rows still contribute to the MI term.

use alloc::{format, string::String, vec, vec::Vec};

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cmmd::{cmmd_loss, CmmdResult};
use crate::datasets::{BatchSampler, DomainDataset, UNLABELED};
use crate::infoloss::{conditional_entropy_loss, mi_loss, partial_mi_loss};
use crate::kernels::{one_hot, KernelSpec, LabeledBatch};
use crate::matrix::Matrix;
use crate::model::{cross_entropy, ForwardTrace, MlpModel, ParamGrads};
use crate::optim::{AdamState, LearningRates};
use crate::pseudo::select_pseudo_labels;
use crate::{Error, Result};

const STREAM_SOURCE: u64 = 0;
const STREAM_TARGET: u64 = 1;
const STREAM_PRETRAIN: u64 = 2;
const STREAM_INIT: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Mode {
    #[default]
    Uda,
    Partial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Ablation {
    pub no_cmmd: bool,
    pub no_marginal_entropy: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub lambda0: f64,
    pub lambda1: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub reg_lambda: f64,
    pub bandwidths: Vec<f64>,
    pub batch_n: usize,
    pub pretrain_epochs: usize,
    pub adapt_steps: usize,
    pub lr_feature: f64,
    pub lr_classifier: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub mode: Mode,
    pub ablation: Ablation,
    /// Use true target labels instead of pseudo-labels in the CMMD term.
    pub oracle_target_labels: bool,
    /// Emit metrics (and evaluate on the target set) every this many steps.
    pub log_every: usize,
    pub early_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda0: 0.1,
            lambda1: 0.2,
            gamma0: 0.95,
            gamma1: 1.5,
            reg_lambda: KernelSpec::DEFAULT_REG_LAMBDA,
            bandwidths: KernelSpec::DEFAULT_BANDWIDTHS.to_vec(),
            batch_n: 32,
            pretrain_epochs: 20,
            adapt_steps: 2000,
            lr_feature: 2e-4,
            lr_classifier: 2e-4,
            hidden: vec![64, 64],
            seed: 0,
            mode: Mode::Uda,
            ablation: Ablation::default(),
            oracle_target_labels: false,
            log_every: 100,
            early_stop: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda0 >= 0.0) || !(self.lambda1 >= 0.0) {
            return bad(format!(
                "lambda0 {} and lambda1 {} must be >= 0",
                self.lambda0, self.lambda1
            ));
        }
        if !(self.gamma0 > 0.0 && self.gamma0 < 1.0) {
            return bad(format!("gamma0 {} must lie in (0, 1)", self.gamma0));
        }
        if !(self.gamma1 > 0.0) {
            return bad(format!("gamma1 {} must be positive", self.gamma1));
        }
        if self.batch_n < 2 {
            return bad(format!("batch_n {} must be at least 2", self.batch_n));
        }
        if !(self.lr_feature >= 0.0) || !(self.lr_classifier >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden must list at least one positive width".into());
        }
        self.kernel().map(|_| ())
    }

    pub fn kernel(&self) -> Result<KernelSpec> {
        KernelSpec::uniform(self.bandwidths.clone(), self.reg_lambda)
    }

    pub fn learning_rates(&self) -> LearningRates {
        LearningRates {
            feature: self.lr_feature,
            classifier: self.lr_classifier,
        }
    }

    /// Fresh model for the given data dimensions, seeded from `seed`.
    pub fn init_model(&self, input_dim: usize, class_count: usize) -> Result<MlpModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(STREAM_INIT);
        MlpModel::init(input_dim, &self.hidden, class_count, &mut rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepMetrics {
    pub step: usize,
    pub loss_sc: f64,
    pub loss_cmmd: f64,
    pub loss_mi: f64,
    pub loss_total: f64,
    pub pseudo_count: usize,
    /// Fraction of pseudo-labels that match the held-out truth, when known.
    pub pseudo_accuracy: Option<f64>,
    /// Accuracy on the labelled target rows; filled at logging steps only.
    pub target_accuracy: Option<f64>,
}

/// A drawn mini-batch: inputs plus, when known, class indices.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Matrix,
    pub classes: Option<Vec<usize>>,
}

impl Batch {
    pub fn from_dataset(ds: &DomainDataset, indices: &[usize]) -> Self {
        let labeled = indices.iter().all(|&i| ds.labels()[i] != UNLABELED);
        let classes = labeled.then(|| indices.iter().map(|&i| ds.labels()[i] as usize).collect());
        Self {
            x: ds.x().select_rows(indices),
            classes,
        }
    }
}

/// Target rows that enter the CMMD term, with their (pseudo-)classes.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TargetSelection {
    pub indices: Vec<usize>,
    pub classes: Vec<usize>,
}

/// Loss terms of one joint evaluation, before weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLoss {
    pub sc: f64,
    pub cmmd: f64,
    pub mi: f64,
    pub total: f64,
}

/// Objective value and parameter gradient for fixed target labels.
pub fn joint_loss_and_grads(
    model: &MlpModel,
    source: &Batch,
    target: &Batch,
    selection: &TargetSelection,
    cfg: &TrainConfig,
    kernel: &KernelSpec,
) -> Result<(JointLoss, ParamGrads)> {
    let source_classes = source
        .classes
        .as_deref()
        .ok_or_else(|| Error::Data("source batch is unlabeled".into()))?;
    let trace_s = model.forward(&source.x)?;
    let trace_t = model.forward(&target.x)?;
    joint_from_traces(
        model,
        &trace_s,
        &trace_t,
        source_classes,
        selection,
        cfg,
        kernel,
    )
}

fn joint_from_traces(
    model: &MlpModel,
    trace_s: &ForwardTrace,
    trace_t: &ForwardTrace,
    source_classes: &[usize],
    selection: &TargetSelection,
    cfg: &TrainConfig,
    kernel: &KernelSpec,
) -> Result<(JointLoss, ParamGrads)> {
    let c = model.class_count();
    let source_labels = one_hot(source_classes, c)?;
    let (sc, grad_probs_s) = cross_entropy(&trace_s.probs, &source_labels)?;

    let dim = model.feature_dim();
    let selected = &selection.indices;
    let cmmd = if cfg.ablation.no_cmmd || selected.is_empty() {
        CmmdResult::skipped(trace_s.len(), selected.len(), dim)
    } else {
        let s = LabeledBatch::new(trace_s.features.clone(), source_labels)?;
        let t = LabeledBatch::from_classes(
            trace_t.features.select_rows(selected),
            &selection.classes,
            c,
        )?;
        cmmd_loss(&s, &t, kernel)?
    };

    let (mi, grad_mi) = if cfg.ablation.no_marginal_entropy {
        conditional_entropy_loss(&trace_t.probs)?
    } else {
        match cfg.mode {
            Mode::Uda => mi_loss(&trace_t.probs)?,
            Mode::Partial => partial_mi_loss(&trace_t.probs, cfg.gamma1)?,
        }
    };

    let grad_features_s = cmmd.grad_zs.scale(cfg.lambda0);
    let mut grad_features_t = Matrix::zeros(trace_t.len(), dim);
    for (r, &i) in selected.iter().enumerate() {
        for (g, v) in grad_features_t
            .row_mut(i)
            .iter_mut()
            .zip(cmmd.grad_zt.row(r))
        {
            *g += cfg.lambda0 * v;
        }
    }
    let mut grads = model.backward(trace_s, &grad_probs_s, &grad_features_s)?;
    grads.add_assign(&model.backward(trace_t, &grad_mi.scale(cfg.lambda1), &grad_features_t)?)?;
    let loss = JointLoss {
        sc,
        cmmd: cmmd.value,
        mi,
        total: sc + cfg.lambda0 * cmmd.value + cfg.lambda1 * mi,
    };
    Ok((loss, grads))
}

/// One joint update. `target.classes` is read only for `pseudo_accuracy` and
/// for the oracle-label mode.
pub fn adapt_step(
    model: &mut MlpModel,
    adam: &mut AdamState,
    source: &Batch,
    target: &Batch,
    cfg: &TrainConfig,
    kernel: &KernelSpec,
    step: usize,
) -> Result<StepMetrics> {
    let source_classes = source
        .classes
        .as_deref()
        .ok_or_else(|| Error::Data("source batch is unlabeled".into()))?;
    let trace_s = model.forward(&source.x)?;
    let trace_t = model.forward(&target.x)?;

    // Pseudo-labels come from the current classifier and are never
    // differentiated through.
    let selection = if cfg.oracle_target_labels {
        let truth = target
            .classes
            .clone()
            .ok_or_else(|| Error::Data("oracle label mode needs labelled target rows".into()))?;
        TargetSelection {
            indices: (0..target.x.rows()).collect(),
            classes: truth,
        }
    } else {
        let p = select_pseudo_labels(&trace_t.probs, cfg.gamma0)?;
        TargetSelection {
            indices: p.indices,
            classes: p.classes,
        }
    };
    let pseudo_accuracy = match (&target.classes, selection.indices.is_empty()) {
        (Some(truth), false) => {
            let hits = selection
                .indices
                .iter()
                .zip(&selection.classes)
                .filter(|(i, k)| truth[**i] == **k)
                .count();
            Some(hits as f64 / selection.indices.len() as f64)
        }
        _ => None,
    };

    let (loss, grads) = joint_from_traces(
        model,
        &trace_s,
        &trace_t,
        source_classes,
        &selection,
        cfg,
        kernel,
    )?;
    adam.step(model, &grads, cfg.learning_rates())?;

    Ok(StepMetrics {
        step,
        loss_sc: loss.sc,
        loss_cmmd: loss.cmmd,
        loss_mi: loss.mi,
        loss_total: loss.total,
        pseudo_count: selection.indices.len(),
        pseudo_accuracy,
        target_accuracy: None,
    })
}

/// Minimises source cross-entropy for `cfg.pretrain_epochs` shuffled passes,
/// with Adam at `lr_classifier` for every layer.
pub fn pretrain(
    mut model: MlpModel,
    source: &DomainDataset,
    cfg: &TrainConfig,
) -> Result<MlpModel> {
    if !source.is_fully_labeled() {
        return Err(Error::Data(format!(
            "source dataset {} has unlabeled rows",
            source.name()
        )));
    }
    if cfg.pretrain_epochs == 0 {
        return Ok(model);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_PRETRAIN);
    let mut adam = AdamState::new(&model);
    let lr = LearningRates::uniform(cfg.lr_classifier);
    let mut order: Vec<usize> = (0..source.len()).collect();
    for _ in 0..cfg.pretrain_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_n) {
            let batch = Batch::from_dataset(source, chunk);
            let trace = model.forward(&batch.x)?;
            let labels = one_hot(
                batch.classes.as_deref().unwrap_or_default(),
                model.class_count(),
            )?;
            let (_, grad_probs) = cross_entropy(&trace.probs, &labels)?;
            let grads = model.backward(
                &trace,
                &grad_probs,
                &Matrix::zeros(trace.len(), model.feature_dim()),
            )?;
            adam.step(&mut model, &grads, lr)?;
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes with no labelled rows.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub labeled_count: usize,
}

impl Evaluation {
    /// Fraction of labelled rows predicted into a class `>= first_class`.
    pub fn fraction_predicted_at_or_above(&self, first_class: usize) -> f64 {
        let hits: usize = self
            .confusion
            .iter()
            .map(|row| row.iter().skip(first_class).sum::<usize>())
            .sum();
        hits as f64 / self.labeled_count.max(1) as f64
    }
}

/// Accuracy and confusion over the labelled rows of `ds`.
pub fn evaluate(model: &MlpModel, ds: &DomainDataset) -> Result<Evaluation> {
    let c = model.class_count();
    if ds.class_count() != c {
        return Err(Error::shape(
            "evaluate",
            format!("dataset has {} classes, model {c}", ds.class_count()),
        ));
    }
    let trace = model.forward(ds.x())?;
    let mut confusion = vec![vec![0usize; c]; c];
    for (&label, pred) in ds.labels().iter().zip(trace.predictions()) {
        if label != UNLABELED {
            confusion[label as usize][pred] += 1;
        }
    }
    let labeled_count: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..c).map(|k| confusion[k][k]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[k] as f64 / total as f64)
        })
        .collect();
    Ok(Evaluation {
        accuracy: if labeled_count == 0 {
            0.0
        } else {
            correct as f64 / labeled_count as f64
        },
        per_class_accuracy,
        confusion,
        labeled_count,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub log: Vec<StepMetrics>,
    pub pretrain_eval: Evaluation,
    pub final_eval: Evaluation,
    pub source_eval: Evaluation,
    pub steps_run: usize,
}

/// Stateful driver for a single run.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    source: &'a DomainDataset,
    target: &'a DomainDataset,
    cfg: TrainConfig,
    kernel: KernelSpec,
    model: MlpModel,
    adam: AdamState,
    source_sampler: BatchSampler,
    target_sampler: BatchSampler,
    step: usize,
    history: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        source: &'a DomainDataset,
        target: &'a DomainDataset,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if source.class_count() != target.class_count() {
            return Err(Error::Data(format!(
                "source has {} classes, target {}",
                source.class_count(),
                target.class_count()
            )));
        }
        if source.input_dim() != target.input_dim() {
            return Err(Error::Data(format!(
                "input dims {} vs {}",
                source.input_dim(),
                target.input_dim()
            )));
        }
        if !source.is_fully_labeled() {
            return Err(Error::Data(format!(
                "source dataset {} has unlabeled rows",
                source.name()
            )));
        }
        let model = cfg.init_model(source.input_dim(), source.class_count())?;
        Ok(Self {
            source,
            target,
            kernel: cfg.kernel()?,
            adam: AdamState::new(&model),
            model,
            source_sampler: BatchSampler::for_dataset(source, cfg.seed, STREAM_SOURCE)?,
            target_sampler: BatchSampler::for_dataset(target, cfg.seed, STREAM_TARGET)?,
            cfg,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Replaces the model and resets the optimizer state.
    pub fn set_model(&mut self, model: MlpModel) {
        self.adam = AdamState::new(&model);
        self.model = model;
    }

    pub fn pretrain(&mut self) -> Result<()> {
        let model = pretrain(self.model.clone(), self.source, &self.cfg)?;
        self.set_model(model);
        Ok(())
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let n = self.cfg.batch_n;
        let s = Batch::from_dataset(self.source, &self.source_sampler.next_batch(n));
        let t = Batch::from_dataset(self.target, &self.target_sampler.next_batch(n));
        self.step += 1;
        let step = self.step;
        let m = adapt_step(
            &mut self.model,
            &mut self.adam,
            &s,
            &t,
            &self.cfg,
            &self.kernel,
            step,
        )
        .map_err(|e| Error::AtStep {
            step,
            source: alloc::boxed::Box::new(e),
        })?;
        self.history.push(m.loss_total);
        Ok(m)
    }

    /// True once the 100-step moving average of the total loss has moved by
    /// less than 1e-5 over the last 100 steps.
    pub fn converged(&self) -> bool {
        const WINDOW: usize = 100;
        let h = &self.history;
        if !self.cfg.early_stop || h.len() < 2 * WINDOW {
            return false;
        }
        let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let now = avg(&h[h.len() - WINDOW..]);
        let before = avg(&h[h.len() - 2 * WINDOW..h.len() - WINDOW]);
        (now - before).abs() < 1e-5
    }

    /// Pre-trains, adapts for `adapt_steps` (or until converged) and
    /// evaluates. `on_metrics` sees every logged row as it is produced.
    pub fn run(mut self, mut on_metrics: impl FnMut(&StepMetrics)) -> Result<TrainOutcome> {
        self.pretrain()?;
        let pretrain_eval = evaluate(&self.model, self.target)?;
        let mut log = Vec::new();
        for i in 0..self.cfg.adapt_steps {
            let mut m = self.step()?;
            let last = i + 1 == self.cfg.adapt_steps || self.converged();
            if m.step % self.cfg.log_every == 0 || last {
                let e = evaluate(&self.model, self.target)?;
                m.target_accuracy = (e.labeled_count > 0).then_some(e.accuracy);
                on_metrics(&m);
                log.push(m);
            }
            if self.converged() {
                break;
            }
        }
        let final_eval = evaluate(&self.model, self.target)?;
        let source_eval = evaluate(&self.model, self.source)?;
        Ok(TrainOutcome {
            model: self.model,
            log,
            pretrain_eval,
            final_eval,
            source_eval,
            steps_run: self.step,
        })
    }
}

/// Full run with default logging.
pub fn train(
    source: &DomainDataset,
    target: &DomainDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    Trainer::new(source, target, cfg.clone())?.run(|_| {})
}
