//! The encoder-decoder transformer, its loss, optimizer, training loop and
//! checkpoint format.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod scalar;
pub mod train;
pub mod transformer;

pub use checkpoint::{load_checkpoint, load_typed, save_checkpoint, AnyModel};
pub use config::{ModelConfig, TrainConfig};
pub use loss::{smoothed_loss_and_grad, LossStats};
pub use scalar::{DType, Scalar};
pub use train::{encode_pairs, evaluate_loss, make_batches, train, EpochReport};
pub use transformer::{DecoderCache, EncodedSource, Example, ModelState};
