//! Differentiable-network substrate: tensors, a reverse-mode tape, the
//! convolutional backbone with projector and classifier heads,
//! optimizers, the learning-rate schedule, checkpoints, and a
//! finite-difference gradient checker.

pub mod autodiff;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod optim;
pub mod schedule;
pub mod tensor;

pub use autodiff::{CustomOp, NodeId, Tape};
pub use model::{ArchDescriptor, BnMode, Binding, Model, ParamSet};
pub use tensor::Tensor;
