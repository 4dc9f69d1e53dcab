//! Desk-scale trainable transducer and its synthetic corpus.

pub mod model;
pub mod synth;
pub mod train;

pub use model::{model_grad_check, ModelDims, Params, ToyModel, PARAM_NAMES};
pub use synth::{synth_corpus, synth_corpus_with, SynthConfig, SynthUtterance, FEATURES};
pub use train::{
    edit_distance, evaluate, fine_tune, sweep_br, train, EvalReport, LossKind, SweepRow, TrainConfig, TrainOutcome,
};
