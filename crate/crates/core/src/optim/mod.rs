//! Initialization, Adam with L2 regularization, the training loop and
//! checkpoint persistence.

mod adam;
mod checkpoint;
mod init;
mod regularize;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    decode_checkpoint, decode_header, encode_checkpoint, load_checkpoint, read_checkpoint_header, save_checkpoint,
    AdamHeader, ArrayEntry, Checkpoint, CheckpointHeader, RngState, FORMAT_VERSION, MAGIC,
};
pub use init::init_weights;
pub use regularize::{regularized_loss, regularized_loss_graph};
pub use train::{
    checkpoint_path, trace_csv, train, write_trace_csv, LossReduction, TraceRow, TrainConfig, TrainOutcome, Trainer,
    TRACE_HEADER,
};
