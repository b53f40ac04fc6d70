//! Variance-reduced gradient-based meta-learning.
//!
//! Each support point of a task contributes a Laplace posterior over the
//! adapted parameters: a one-step gradient update as its mean and the loss
//! curvature as its precision. The task's adapted parameters are the mean of
//! the product of these Gaussians, the minimum-variance combination of the
//! per-point estimates. Plain one-step averaging (ANIL/CAVIA style) is provided
//! as the baseline.
//!
//! Layout:
//! - [`tensor`], [`linalg`], [`autodiff`]: dense matrices, SPD solves and a
//!   reverse-mode tape whose solve adjoint lets meta-gradients pass through fusion.
//! - [`model`], [`checkpoint`]: MLP feature extractor, linear head, context
//!   network and their binary checkpoint format.
//! - [`adaptation`]: per-point steps, curvatures, regularisation and fusion.
//! - [`tasks`]: sine and ODE task families, label noise, CSV series windows.
//! - [`training`]: the bi-level loop with Adam on the meta-parameters.
//! - [`harness`]: variance, landscape, conditioning, noise and timing experiments.
//! - [`config`]: the sectioned key/value run configuration.

pub mod adaptation;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod seed;
pub mod tasks;
pub mod training;
pub mod tensor;

pub use autodiff::{Eval, Graph, Tape, Var};
pub use model::{AdaptMode, Architecture, MetaParams};
pub use seed::SeedTree;
pub use tensor::{LinalgError, Primitive, Tensor};
