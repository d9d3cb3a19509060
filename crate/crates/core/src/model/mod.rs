//! The multi-task network: fused-input embedding, dilated causal state
//! encoder, causal attention stack, action decoder and reward decoder.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use config::{Ablation, ModelConfig, RewardHead, SearchSpace};
pub use forward::{
    causal_attention, decode_actions, decode_rewards, embed_sequence, encode_causal_states, forward_on_tape,
    select_action, BoundParams, Dropout, ForwardOutput, ForwardVars, Model, SelectionMode,
};
pub use params::{expected_shapes, init_params, names, validate_params, ModelParams};
