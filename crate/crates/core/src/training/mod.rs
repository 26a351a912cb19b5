//! Loss terms, self-paced pseudo labelling, training loops and evaluation.

mod losses;
mod metrics;
mod runner;
mod spst;

pub use losses::{
    loss_cls_source, loss_cls_target, loss_implicit, loss_mask, total_loss, LossComponents,
    LossWeights,
};
pub use metrics::{
    format_metrics_csv, format_selection_csv, write_metrics_csv, write_selection_csv,
    METRICS_HEADER, SELECTION_HEADER,
};
pub use runner::{
    adapt, confusion_from, draw_sample, evaluate, implicit_error, predict_probabilities,
    pretrain_implicits, spst_rounds, step_branch_signature, step_objective, train_source_only,
    CloudSample, DomainData, EpochMetrics, Evaluation, Objective, PreparedCloud, RoundStats,
    SpstReport, StepBatch, StepOutput, TrainSettings,
};
pub use spst::{gamma_for_fraction, selection_objective, spst_select, PseudoLabelSet, SpstConfig};
