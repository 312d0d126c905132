//! Conditional-distribution domain adaptation at desk scale.
//!
//! The crate aligns the class-conditional feature distributions of a labelled
//! source domain and an unlabelled target domain. Alignment is measured by the
//! conditional maximum mean discrepancy (CMMD) between the two domains'
//! conditional kernel embeddings, estimated from mini-batches with
//! pseudo-labelled target samples. A mutual-information term sharpens
//! per-sample target predictions while keeping the predicted class marginal
//! balanced; its partial variant caps the marginal term so that target samples
//! are not pushed into classes absent from the target label space.
//!
//! Everything here is pure computation over [`Matrix`] values and seeded RNGs,
//! so the crate builds without `std` (an allocator is required). File formats,
//! configuration parsing and the command-line front end live in the `dcan`
//! crate.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`matrix`] | dense `f64` matrices, Cholesky solve, trace of products |
//! | [`kernels`] | Gaussian-mixture and delta label kernels, Gram matrices, kernel gradients |
//! | [`cmmd`] | empirical CMMD and its gradient w.r.t. both feature batches |
//! | [`infoloss`] | entropy, mutual-information loss and its capped partial variant |
//! | [`model`] | MLP feature extractor + softmax classifier with manual backprop |
//! | [`optim`] | Adam with per-group learning rates |
//! | [`pseudo`] | confidence-thresholded pseudo-labels |
//! | [`datasets`] | synthetic shifted clusters, partial targets, mini-batch sampling |
//! | [`trainer`] | source pre-training and the joint adaptation loop |
//! | [`gradcheck`] | central finite-difference verification suites |
#![cfg_attr(not(any(feature = "std", test)), no_std)]
#![forbid(unsafe_code)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod cmmd;
pub mod datasets;
mod error;
pub mod gradcheck;
pub mod infoloss;
pub mod kernels;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod pseudo;
pub mod trainer;

pub use cmmd::{cmmd_loss, cmmd_loss_with, CmmdResult};
pub use datasets::{
    make_partial_target, make_shifted_clusters, BatchSampler, ClusterSpec, DomainDataset,
};
pub use error::{Error, Result};
pub use gradcheck::{check_cmmd, check_composite, check_mi, GradCheckReport};
pub use infoloss::{entropy, mi_loss, partial_mi_loss, PredictionBatch};
pub use kernels::{
    gaussian_mixture_kernel, gram, gram_gradient, label_gram, FeatureKernel, KernelSpec,
    LabeledBatch, LinearKernel,
};
pub use matrix::Matrix;
pub use model::{cross_entropy, Activation, Dense, ForwardTrace, MlpModel, ParamGrads};
pub use optim::{AdamState, LearningRates};
pub use pseudo::{select_pseudo_labels, PseudoLabels};
pub use trainer::{
    adapt_step, evaluate, joint_loss_and_grads, pretrain, train, Ablation, Batch, Evaluation,
    JointLoss, Mode, StepMetrics, TargetSelection, TrainConfig, TrainOutcome, Trainer,
};
