//! Encoder-decoder network, optimizer, learning-rate schedule, checkpoints
//! and the training loop.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod network;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use network::{Gradients, Network, NetworkSpec};
pub use schedule::CyclicLr;
pub use tensor::Tensor;
pub use train::{
    predict_image, read_history_csv, train, train_with_monitors, validate, write_history_csv,
    EpochRecord, MonitorOutcome, Sample, TrainConfig, TrainObserver, TrainOutcome, Validation,
};
