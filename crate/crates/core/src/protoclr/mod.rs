//! Self-supervised prototypical pre-training: every image in a batch is a
//! one-shot class whose augmented views must be classified back to it.

mod loss;
mod train;

pub use loss::{
    accuracy_from_distances, nearest, protoclr_loss, protoclr_loss_on_tape, query_targets, training_accuracy,
};
pub use train::{training_checkpoint, train_protoclr, LogRecord, ProtoClrConfig, TrainLog, TrainOutcome};
