use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::channel::{generate_channels, IcConfig};
use super::wmmse::{wmmse_solve, WmmseConfig};
use crate::equinet::{permute_blocks_1d, permute_blocks_2d, BlockPermutation};
use crate::numcore::Tensor;
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Channel `x [K×K]` with its normalized power label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcSample {
    pub k: usize,
    pub x: Tensor,
    pub y: Vec<f64>,
    /// Produced by relabeling another sample.
    pub augmented: bool,
}

impl IcSample {
    pub fn new(x: Tensor, y: Vec<f64>, augmented: bool) -> Result<Self> {
        let k = super::channel::check_channel(&x)?;
        if y.len() != k {
            return Err(Error::shape(format!("label has {} entries for K = {k}", y.len())));
        }
        if y.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("labels must lie in [0, 1]"));
        }
        Ok(IcSample { k, x, y, augmented })
    }

    /// `{ΛᵀXΛ, Λᵀy}`, flagged as augmented.
    pub fn permuted(&self, perm: &BlockPermutation) -> Result<Self> {
        let x = permute_blocks_2d(&self.x, perm, (1, 1))?;
        let y = permute_blocks_1d(&Tensor::vector(self.y.clone()), perm, 1)?.into_data();
        Ok(IcSample { k: self.k, x, y, augmented: true })
    }
}

/// `n` samples at `K = k` labeled by WMMSE. Sample `i` draws from its own
/// stream so the set does not depend on generation order.
pub fn make_ic_dataset(
    n: usize,
    k: usize,
    ic: &IcConfig,
    wm: &WmmseConfig,
    seed: u64,
) -> Result<Vec<IcSample>> {
    (0..n).map(|i| ic_sample_at(i, k, ic, wm, seed)).collect()
}

/// Sample `index` of the dataset [`make_ic_dataset`] draws with `seed`.
pub fn ic_sample_at(index: usize, k: usize, ic: &IcConfig, wm: &WmmseConfig, seed: u64) -> Result<IcSample> {
    let x = generate_channels(k, &mut rng::stream(seed, index as u64))?;
    let y = wmmse_solve(&x, ic, wm)?;
    IcSample::new(x, y, false)
}

/// Keeps `samples` and appends `count` random relabelings of them.
pub fn augment(samples: &[IcSample], count: usize, rng: &mut Rng) -> Result<Vec<IcSample>> {
    if samples.is_empty() && count > 0 {
        return Err(Error::contract("cannot augment an empty dataset"));
    }
    let mut out = Vec::with_capacity(samples.len() + count);
    out.extend_from_slice(samples);
    for _ in 0..count {
        let base = &samples[rng.random_range(0..samples.len())];
        let perm = BlockPermutation::random(base.k, rng);
        out.push(base.permuted(&perm)?);
    }
    Ok(out)
}

/// Number of distinct relabelings of a `k`-link sample, `k!`.
pub fn distinct_permutations(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}
