use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::numcore::Tensor;
use crate::rng::Rng;
use crate::{Error, Result};

/// A permutation of `K` block indices, zero-based.
///
/// Applying it to blocks `x_0..x_{K-1}` yields `[x_{perm[0]}, x_{perm[1]}, ...]`,
/// i.e. `Λᵀx` where column `k` of `Λ` is the unit vector `e_{perm[k]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPermutation {
    perm: Vec<usize>,
}

impl BlockPermutation {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::contract(format!("{perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        Ok(BlockPermutation { perm })
    }

    pub fn identity(k: usize) -> Self {
        BlockPermutation { perm: (0..k).collect() }
    }

    /// Uniform over all `k!` permutations.
    pub fn random(k: usize, rng: &mut Rng) -> Self {
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(rng);
        BlockPermutation { perm }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        BlockPermutation { perm: inv }
    }
}

/// Reorders the `K` contiguous blocks of width `block_width`. Accepts `[n]`
/// or `[batch, n]`; each row is permuted independently.
pub fn permute_blocks_1d(x: &Tensor, perm: &BlockPermutation, block_width: usize) -> Result<Tensor> {
    let k = perm.len();
    let n = x.cols();
    if x.ndim() == 0 || x.ndim() > 2 || n != k * block_width {
        return Err(Error::shape(format!(
            "{:?} does not split into {k} blocks of width {block_width}",
            x.shape()
        )));
    }
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(n.max(1)) {
        for &p in perm.as_slice() {
            out.extend_from_slice(&row[p * block_width..(p + 1) * block_width]);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `ΛᵀXΛ` on a natural `[K·r, K·c]` matrix (optionally batched): block
/// `(m, n)` of the result is block `(perm[m], perm[n])` of `x`.
pub fn permute_blocks_2d(
    x: &Tensor,
    perm: &BlockPermutation,
    block: (usize, usize),
) -> Result<Tensor> {
    let k = perm.len();
    let (r, c) = block;
    let (batch, rows, cols) = match x.shape() {
        [a, b] => (1, *a, *b),
        [n, a, b] => (*n, *a, *b),
        _ => (0, 0, 0),
    };
    if rows != k * r || cols != k * c || rows * cols == 0 {
        return Err(Error::shape(format!(
            "{:?} is not a {k}×{k} grid of {r}×{c} blocks",
            x.shape()
        )));
    }
    let p = perm.as_slice();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for bi in 0..batch {
        let base = bi * rows * cols;
        for i in 0..rows {
            let si = p[i / r] * r + i % r;
            for m in 0..k {
                let dst = base + i * cols + m * c;
                let s = base + si * cols + p[m] * c;
                out[dst..dst + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
