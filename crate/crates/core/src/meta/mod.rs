//! Episodic tuning, the property classifier, evaluation and pre-training.

mod eval;
mod model;
mod pretrain;
mod train;

pub use eval::{
    evaluate, evaluation_episode, mean_std, predict_episode, roc_auc, EmbeddingRecord, EvalConfig, EvalOutput,
    Prediction, PropertyReport,
};
pub use model::{classify, context_bundle, score_molecules, EpisodeInput, Model, ModelSpec, Scored, ANCHOR_PREFIX};
pub use pretrain::{
    choose_masked, init_pretraining, masked_atom_loss, pretrain_masked_atoms, pretraining_fisher, PretrainConfig,
};
pub use train::{
    eligible_properties, inner_adapt, meta_train, outer_step, query_loss, support_loss, training_episode, MetaConfig,
    StepRecord,
};
