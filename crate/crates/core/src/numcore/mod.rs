//! Dense numerics: tensors, reverse-mode differentiation, optimizers,
//! batch normalization and finite-difference gradient checks.

mod gradcheck;
mod norm;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use norm::{batch_norm, BatchNormState};
pub use optim::{AdamState, Optimizer, RmspropState};
pub use tape::{BatchStats, Gradients, NodeId, Tape};
pub use tensor::{matmul, sigmoid, sigmoid_scalar, softplus, softplus_scalar, Tensor};

use serde::{Deserialize, Serialize};

/// Elementwise activation selector used by every layer type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softplus,
    Sigmoid,
    Identity,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => softplus_scalar(x),
            Activation::Sigmoid => sigmoid_scalar(x),
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
        }
    }

    /// Records the activation on `tape`.
    pub fn record(self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self {
            Activation::Softplus => tape.softplus(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
        }
    }
}
