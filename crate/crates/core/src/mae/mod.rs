//! Masked-autoencoder pretraining with decoupled spatial/spectral masks and
//! hierarchical channel sampling.

mod checkpoint;
mod masking;
mod model;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, restore_into, save_checkpoint,
    CheckpointManifest, TensorEntry, MAGIC,
};
pub use masking::{derive_seed, hcs_sample, make_mask_plan, HcsRange, MaskPlan};
pub use model::{
    decode_reconstruct, encode, encode_visible, forward_loss, mae_loss, normalize_patches,
    DecoderParams, HyperMae, MaeConfig, Preset,
};
pub use train::{pretrain, step_plan, synth_dataset, train_step, Optimizer, OptimizerKind, PretrainOptions, PretrainRun};
