//! Two-step multi-source domain adaptation: a labeling function trained on
//! all domains, then a noise-robust target model trained on its
//! pseudo-labels, with the labeling function refined by implicit-gradient
//! bilevel optimization.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod autodiff;
pub mod bilevel;
pub mod datamodel;
pub mod error;
pub mod first_step;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod pseudolabel;
pub mod stochastic_head;

pub use augment::{cutmix, fixmatch_cm_loss, mixstyle, FixMatchCmConfig, MixedSample};
pub use autodiff::{Dual, Graph, ParamSet, Var};
pub use bilevel::{
    hypergradient, naive_second_step, neumann_inverse_hvp, second_step_update, train_second_step, BilevelState,
    Hypergradient, NeumannConfig, Phase, PhaseTrigger, SecondStepConfig, SecondStepMode, TargetModelState, TargetNet,
};
pub use datamodel::{
    generate_synthetic_msda, iterate_batches, load_manifest, load_multi_domain_dataset, DomainSample, InputShape,
    LabeledSet, LayoutSpec, MultiDomainBatch, MultiDomainDataset, ShiftKind, SyntheticShiftConfig,
};
pub use error::{Error, Result};
pub use first_step::{train_step1, AdaptationLossPlugin, LabelingFunctionState, LabelingNet, Step1Config};
pub use harness::{ExperimentConfig, ExperimentSummary, MetricsRecord, RunMode};
pub use nn::{Activation, BackboneSpec};
pub use optim::{LrSchedule, Sgd, SgdConfig};
pub use pseudolabel::{
    confidence_mask, gumbel_soft_label, hard_label, update_adaptive_threshold, PseudoLabel, ThresholdMode,
    ThresholdState,
};
pub use stochastic_head::{
    entropy_max_loss, forward_stochastic, uncertainty_score, StochasticFeature, StochasticHeadParams,
};
