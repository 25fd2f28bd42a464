//! The network: embedders, unimodal and grounded encoders, decoders and the
//! fusion classifier.

mod config;
mod network;
mod params;

pub use config::ModelConfig;
pub use network::{
    extract_attention_map, image_maskable, sample_mask, text_maskable, AttentionMap, AttentionRecorder, ForwardOutputs,
    Modality, Network,
};
pub use params::{AlifuseParams, AttentionIds, BlockIds, Bound, CrossIds, Layout, LinearIds, NormIds, ParamId};
