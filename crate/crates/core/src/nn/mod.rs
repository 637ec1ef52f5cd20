//! Minimal reverse-mode building blocks: named parameters, layers with
//! explicit backward passes, and the AdamW optimiser.

pub mod layers;
pub mod optim;
pub mod params;

pub use layers::{
    gelu, gelu_backward, gelu_backward_gated, gelu_with_gate, softmax_rows_inplace, upsample_bilinear, upsample_bilinear_backward,
    Attention, Conv2d, GroupNorm, Init, LayerNorm, Linear,
};
pub use optim::{warmup_factor, AdamW};
pub use params::{Grads, ParamId, ParamStore};
