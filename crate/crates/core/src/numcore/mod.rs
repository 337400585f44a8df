//! Dense numeric substrate: tensors, a reverse-mode tape over the op set the
//! forecaster uses, Adam, and a finite-difference gradient checker.

mod gradcheck;
mod gru;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, Coords, GradCheckReport, HasParams, ParamCheck};
pub use gru::{gru_cell, GruParams};
pub use params::{xavier_uniform, AdamConfig, Param, ParamId, ParamStore};
pub use tape::{sigmoid, softmax, softmax_in_place, BnMode, BnStats, GatherRows, Tape, Var};
pub use tensor::Tensor;
