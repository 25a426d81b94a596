//! The forecasting network: gated residual networks, variable selection,
//! LSTM encoder/decoder, static enrichment and interpretable multi-head
//! attention.

mod checkpoint;
mod config;
mod layers;
mod params;
mod tft;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC,
};
pub use config::{Mode, ModelConfig};
pub use layers::{
    grn_forward, interpretable_mha, vsn_forward, AttentionLayer, AttentionMask, AttentionOutput, GrnLayer, VsnLayer,
};
pub use params::ParamStore;
pub use tft::{AttentionTensor, ForwardOutput, Tft, VsnWeights, PREDICT_CHUNK};
