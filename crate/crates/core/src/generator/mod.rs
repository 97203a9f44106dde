//! The pretrained generator (semantically conditioned LSTM), its auxiliary
//! language model, and their training loops.

mod model;
mod train;

pub use model::{Generator, GeneratorConfig, StepContext, StepOutput};
pub use train::{encode_examples, mean_loss, train_generator, train_lm, train_model, EpochRecord, Example, TrainLog};
