//! Datasets, the model bundle, prior training and evaluation.

mod dataset;
mod eval;
mod model;
mod train;

pub use dataset::{gen_synthetic, load_features, save_features, Dataset, Split, SyntheticKind, SyntheticSpec};
pub use eval::{evaluate, evaluate_propagators, EvalMode};
pub use model::{
    argmax, forward_deterministic, is_error, load_model, save_model, FeatureKind, FeatureMap, ModelBundle,
};
pub use train::{
    batch_loss_grad, datum_loss_grad, init_model, mean_loss, train_prior, ParamGrad, PriorConfig, TrainLogEntry,
    TrainReport,
};
