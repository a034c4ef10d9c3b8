//! Convolutional deep Gaussian process classifiers.
//!
//! Layers are sparse variational GPs whose kernels may compare images
//! patch by patch; the stack is trained by doubly-stochastic variational
//! inference under a softmax likelihood. Everything numeric is generic over
//! [`scalar::Scalar`] (`f32` or `f64`); the aliases below fix the scalar.

pub mod numerics;
pub mod scalar;
pub mod patching;
pub mod kernels;
pub mod svgp_layer;
pub mod model;
pub mod data;
pub mod inducing_init;
pub mod checkpoint;
pub mod train;
pub mod experiment;

pub type Matrix64 = numerics::Matrix<f64>;
pub type Matrix32 = numerics::Matrix<f32>;
pub type Model64 = model::DgpModel<f64>;
pub type Model32 = model::DgpModel<f32>;
pub type Layer64 = svgp_layer::LayerState<f64>;
pub type Layer32 = svgp_layer::LayerState<f32>;
pub type Kernel64 = kernels::KernelSpec<f64>;
pub type Kernel32 = kernels::KernelSpec<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type TrainState64 = train::TrainState<f64>;
