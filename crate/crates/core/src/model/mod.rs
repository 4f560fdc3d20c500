//! The autoencoder, its training loop and the linear baseline.

mod autoencoder;
mod metrics;
mod normalize;
mod optim;
mod pca;
mod persist;
mod train;

pub use autoencoder::{Dense, LsaAutoencoder, ModelConfig};
pub use metrics::{per_vertex_errors, reconstruction_error};
pub use normalize::{Normalizer, StdMode, STD_FLOOR};
pub use optim::{learning_rate, Adam, AdamConfig};
pub use pca::Pca;
pub use persist::{read_model_manifest, LayerManifest, ModelManifest, NormalizerManifest, MODEL_FORMAT, MODEL_VERSION};
pub use train::{
    evaluate, log_to_csv, select_samples, split_validation, train, EpochLog, Loss, TrainConfig, TrainOutcome,
    TrainOutputs,
};
pub(crate) use train::write_text;
