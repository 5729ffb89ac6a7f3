//! Dense `f64` tensors, differentiable kernels, parameter storage, gradient
//! checking and checkpoint files.

pub mod blocks;
mod checkpoint;
mod gradcheck;
mod layer;
pub mod ops;
mod params;
mod tensor;

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, TensorEntry,
    CHECKPOINT_FORMAT,
};
pub use gradcheck::{
    grad_check, grad_check_with, relative_error, EntrySelection, GradCheckReport, Stencil,
};
pub use layer::{Layer, LayerKind, LayerSpec};
pub use ops::{
    attention_backward, attention_forward, attention_with_external_kv, Activation, CausalConv1d,
    LayerNorm, Linear, MultiHeadAttention,
};
pub use params::{Init, Param, ParamId, ParamStore};
pub use tensor::Tensor;
#[allow(unused_imports)]
pub(crate) use tensor::gemm;
