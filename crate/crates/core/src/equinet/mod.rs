//! Permutation-equivariant structured layers.
//!
//! A PINN-1D layer acts on `K` blocks with two shared sub-matrices: `U` on
//! the diagonal and `V` off it. A PINN-2D layer acts on a `K × K` grid of
//! blocks as `P·H·Qᵀ` where `P` (resp. `Q`) repeats `A` (resp. `C`) on its
//! diagonal and `B` (resp. `D`) elsewhere. Both are evaluated with block sums
//! so the cost grows linearly in the number of blocks; the dense expansions
//! exist for cross-checking.
//!
//! The optional `beta_K` adapter is a tiny scalar network whose output
//! multiplies the diagonal path, letting one parameter set serve several
//! values of `K`.

mod beta;
mod fc;
mod perm;
mod pinn1d;
mod pinn2d;
mod reference;

pub use beta::{beta_forward, BetaNetParams};
pub use fc::{fc_forward, FcLayer, FcParams, FcSpec};
pub use perm::{permute_blocks_1d, permute_blocks_2d, BlockPermutation};
pub use pinn1d::{
    build_pinn1d, expand_1d_to_dense, pinn1d_forward, Layer1dSpec, Pinn1dLayer, Pinn1dParams,
    Pinn1dSpec,
};
pub use pinn2d::{
    build_pinn2d, dense_2d_forward, expand_2d_to_dense, pinn2d_forward, DenseLayer2d,
    Layer2dSpec, Pinn2dLayer, Pinn2dParams, Pinn2dSpec,
};
pub use reference::{reference_pi_1d, reference_pi_2d, Pi2dParts, Reducer};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::numcore::{NodeId, Tape, Tensor};
use crate::rng::Rng;

/// Parameter initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, fans taken on block widths.
    Uniform,
    /// Uniform with an explicit multiplier on the default bound.
    ScaledUniform(f64),
    Zero,
}

impl Init {
    pub(crate) fn matrix(self, rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
        let bound = match self {
            Init::Zero => return Tensor::zeros(&[rows, cols]),
            Init::Uniform => (6.0 / (rows + cols) as f64).sqrt(),
            Init::ScaledUniform(s) => s * (6.0 / (rows + cols) as f64).sqrt(),
        };
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Tensor::matrix(rows, cols, data).expect("sized")
    }
}

/// Anything holding a flat, ordered list of trainable tensors.
pub trait Parameterized {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;
    /// Stable names in the same order as [`Parameterized::tensors`].
    fn tensor_names(&self) -> Vec<String>;

    /// Records every tensor as a tape leaf, in order.
    fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.tensors()
            .into_iter()
            .map(|t| tape.leaf(t.clone()))
            .collect()
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors().iter().map(|t| t.shape().to_vec()).collect()
    }
}

/// Exact number of scalar trainable weights.
pub trait ParamCount {
    fn count_params(&self) -> usize;
}

pub fn count_params(model: &impl ParamCount) -> usize {
    model.count_params()
}

/// All parameters concatenated in [`Parameterized::tensors`] order.
pub fn flatten(model: &impl Parameterized) -> Vec<f64> {
    model
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect()
}

/// Inverse of [`flatten`]. Panics if `values` has the wrong length.
pub fn unflatten(model: &mut impl Parameterized, values: &[f64]) {
    let mut rest = values;
    for t in model.tensors_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&rest[..n]);
        rest = &rest[n..];
    }
    assert!(rest.is_empty(), "parameter vector too long");
}
