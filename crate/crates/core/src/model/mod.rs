//! Decoder-only transformer with switchable attention masking.

mod config;
mod forward;
mod mask;
mod weights;

pub use config::ModelConfig;
pub(crate) use forward::masked_softmax;
pub use forward::{
    backward, backward_into, forward, forward_with_cache, value_and_grad, ForwardCache, Logits,
    TokenBatch,
};
pub use mask::{AttentionMask, AttentionMode};
pub use weights::{
    init_weights, tensor_layout, Gradients, LayerWeights, Tensor, Weights, OUTPUT_INIT_SCALE,
};
