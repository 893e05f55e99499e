//! Dense tensors, reverse-mode differentiation and the Adam optimizer.
//!
//! Activations are kept as row-major matrices. A [`Graph`] records every
//! operation in creation order; because inputs always precede outputs, a
//! reverse sweep over the node list is a valid topological order for
//! backpropagation.
//!
//! Storage follows the model's scalar type. Row statistics (softmax
//! normalizers, layer-norm moments, loss sums, gradient norms) accumulate in
//! `f64`. Matrix products accumulate in the storage type in a fixed order,
//! so results do not depend on scheduling.

mod adam;
mod functional;
mod graph;
mod kernels;
mod tensor;

pub use adam::{adam_step, clip_grad_norm, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use functional::{log_softmax, next_token_cross_entropy, softmax};
pub(crate) use functional::log_sum_exp;
pub use graph::{AttentionShape, Gradients, Graph, Var};
pub use kernels::{matmul, matmul_nt, matmul_tn};
pub use tensor::Tensor;
