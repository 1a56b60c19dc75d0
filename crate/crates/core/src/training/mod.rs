//! Dual-stream loss, Adam and the minibatch training loop.

pub mod adam;
pub mod loss;
pub mod trainer;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use loss::{
    dual_stream_loss, dual_stream_loss_graph, teacher_forced_loss, teacher_forced_loss_value, teacher_forcing_pair,
};
pub use trainer::{
    batch_gradients, example_gradients, examples, train, train_model, Example, StepLog, TrainConfig, TrainReport,
};
