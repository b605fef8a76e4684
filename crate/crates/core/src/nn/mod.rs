//! Parameterized building blocks: affine layers, MLP stacks, multi-head
//! attention, and post-norm Transformer encoder/decoder blocks.

mod attention;
mod linear;
mod params;
mod transformer;

pub use attention::{multi_head_attention, AttentionParams, HeadParams, HeadTrace};
pub use linear::{mlp_forward, LinearParams, Mlp};
pub use params::{Binding, Param, ParamGroup, ParamId, ParamStore};
pub use transformer::{
    decoder_block, encoder_block, DecoderBlockParams, EncoderBlockParams, FeedForwardParams,
    LayerNormParams, LAYER_NORM_EPS,
};
