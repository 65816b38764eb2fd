//! Encoder, guidance head, multi-scale refinement and decoder, with the
//! losses, metrics, optimiser and trainer around them.

mod adam;
pub mod checkpoint;
mod loss;
mod metrics;
mod model;
mod trainer;

pub use adam::Adam;
pub use loss::{bce_loss, dice_loss, seg_loss, train_loss, BCE_EPS, DICE_SMOOTH};
pub use metrics::{image_metrics, mean_metrics, Metrics, THRESHOLD};
pub use model::{Encoded, Forward, Network, NetworkSpec};
pub use trainer::{
    metrics_csv, network_spec, stream_rng, EpochRecord, Phase, Prediction, SampleEmbeddings,
    TrainState, Trainer, CSV_HEADER,
};
