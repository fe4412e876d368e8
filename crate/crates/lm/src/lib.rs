//! Small decoder language model built from gated sparse attention blocks:
//! joint dense/sparse training, resolution adaptation, evaluation and
//! synthetic corpora.

pub mod checkpoint;
pub mod corpus;
pub mod decode;
pub mod gradcheck;
pub mod model;
pub mod train;

pub use corpus::{synth_task_generate, Corpus, TaskKind};
pub use model::{forward_lm, Model, ModelConfig};
pub use train::{adapt, eval_ppl, train_joint, AdaptSpec, LossRecord, TrainMode, TrainSpec};
