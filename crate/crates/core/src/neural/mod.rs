//! Deterministic dense-network substrate: tensors, layers with explicit
//! backward passes, Adam, and weight serialization.
//!
//! All reductions run in a fixed sequential order inside one thread and
//! transcendentals come from `libm`, so identical inputs produce identical
//! bits on every run and every target. Rust never contracts `a * b + c` into
//! a fused multiply-add on its own, which keeps that guarantee across
//! compilers.

pub mod layers;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use layers::{Attention, BiGru, Embedding, Ffn, Gru, LayerKind, Linear};
pub use optim::{Adam, AdamConfig};
pub use params::{Grads, ParamId, ParamStore};
pub use rng::Rng;
pub use scalar::Real;
pub use tensor::{softmax_rows, softmax_rows_backward, Tensor};
