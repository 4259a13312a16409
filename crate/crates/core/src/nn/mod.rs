//! Dense 64-bit tensors, reverse-mode differentiation, and the neural blocks
//! the models are built from.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{Container, ContainerError};
pub use gradcheck::{check_param_grads, finite_diff_grad_check, relative_error, GradCheckReport};
pub use layers::{
    embed_tokens, linear, mean_pool, multi_head_attention, AttentionConfig, AttentionParams,
    Embedding, LayerNorm, Linear, MultiHeadAttention, TransformerLayer,
};
pub use params::{named_rng, Graph, Param, ParamStore};
pub use tape::{softmax, Gradients, Tape, Var};
pub use tensor::{log_sum_exp, Tensor, TensorError};
