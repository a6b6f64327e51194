//! Lab-MAE: a transformer masked autoencoder over the `4F`-slot token
//! layout, with hand-written backward passes.

mod checkpoint;
mod forward;
mod impute;
mod params;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_trainer, save_checkpoint, FORMAT_VERSION,
};
pub use forward::{
    active_slots, backward, build_attention_mask, encode_input, encode_subset, forward, forward_subset, masked_loss,
    Trace,
};
pub use impute::{impute, impute_normalized, LabMae};
pub use params::{BlockParams, ModelConfig, ModelParams};
pub use train::{
    batch_gradient, checkpoint_path, split_indices, train, EpochLog, TrainConfig, Trainer, ValMetrics,
    BASE_LR_PER_256,
};
