//! Minimal reverse-mode autodiff engine and the neural building blocks,
//! optimizer and schedule both streams are built from.

pub mod grad_check;
mod graph;
pub mod layers;
pub mod optim;
pub mod params;
mod tensor;

pub use grad_check::{grad_check, jitter_params, GradCheckReport};
pub(crate) use graph::softmax_in_place;
pub use graph::{cosine, Graph, Mode, Padding, Value};
pub use layers::{BiLstm, Conv1d, Linear, Lstm, MultiHeadAttention};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, ScheduleSpec};
pub use params::{Binding, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
