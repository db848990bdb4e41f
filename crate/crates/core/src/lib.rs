//! Reverse-mode autodiff engine, CIFAR-style ResNets, nonlinear
//! transformation layers and the feature-level distillation losses built on
//! them.
//!
//! Everything is generic over [`Scalar`]; the aliases at the crate root fix
//! the element type to `f32`, which is what training runs in.

pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use graph::{BatchStats, BnMode, Graph, Norm, Var};
pub use nn::{Arch, ForwardOutput, ForwardValues, Mode, Network, NtlStyle, Paraphraser};
pub use optim::Sgd;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
pub type Paraphraser32 = Paraphraser<f32>;
pub type Sgd32 = Sgd<f32>;
