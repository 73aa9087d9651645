//! Behavior and user encoders.

mod encoders;
mod layers;

pub use encoders::{
    BehaviorEncoder, BehaviorEncoderConfig, EncoderVariant, MaskMode, ModelConfig, Slot, TokenBatch, UserEncoder,
    UserEncoderConfig, UserLayout, UserModel, EMBED_INIT,
};
pub use layers::{masked_mean, AdditiveAttention, MultiHeadSelfAttention};
