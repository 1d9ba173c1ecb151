//! Token UNet denoiser, garment extractor and self-attention fusion.

mod config;
mod forward;
mod sample;
mod train;
mod weights;


pub use config::{BlockInfo, DenoiserConfig, Path};
pub use forward::{
    fused_attention_core, fused_self_attention, timestep_embedding, AttentionWeights, Conditioning, ForwardOptions,
    ForwardTrace, GarmentFeatures, GarmentKeys, Network, NULL_TOKEN,
};
pub use sample::{BranchLog, SampleRequest, Sampler};
pub use train::{base_loss, fusion_loss, BaseTrainer, FusionTrainer, PairedBatch, StepDraw};
pub use weights::{
    block_key, denoiser_layout, fusion_key, fusion_layout, init_denoiser, init_extractor_from_denoiser, pack_plugin,
    unpack_plugin, validate_denoiser, validate_fusion, DENOISER_TAG, EXTRACTOR_TAG, FUSION_TAG,
};
