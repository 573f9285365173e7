//! Minimal reverse-mode autodiff kernel: dense/conv/GRU/attention layers on
//! an arena tape, Adam, weight serialization, and finite-difference gradient
//! verification. Big enough to train the enhancement model at desk scale,
//! nothing more.

pub mod adam;
mod conv;
mod dsp_ops;
pub mod gradcheck;
pub mod layers;
mod ops;
pub mod store;
pub mod tape;
pub mod tensor;

pub(crate) use dsp_ops::scale_magnitudes as dsp_scale_magnitudes;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use layers::{
    apply_layer, bigru, dense, gru_seq, init_layer, mha_over_templates, ActivationKind,
    CriticAxis, CriticSpec, LayerSpec,
};
pub use store::{load_params, save_params, BoundParams, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, Tensor};
