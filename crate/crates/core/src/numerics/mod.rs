//! Minimal differentiable-computation core: arrays, a reverse-mode tape,
//! layers, AdamW with a warmup-cosine schedule, and checkpoint files.

mod array;
pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;

pub(crate) use array::gemm;
pub use array::Array;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use graph::{Graph, Var};
pub use layers::{linear, mhca, softmax, timestep_embedding, CrossAttention, LayerNorm, Linear, Mlp2};
pub use optim::{AdamW, ScheduleConfig};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
