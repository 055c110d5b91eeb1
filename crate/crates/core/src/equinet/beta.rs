use serde::{Deserialize, Serialize};

use super::{Init, ParamCount, Parameterized};
use crate::numcore::{Activation, NodeId, Tape, Tensor};
use crate::rng::Rng;
use crate::{Error, Result};

/// Scalar network `K -> hidden -> beta` with a softplus head.
///
/// Biases are optional; the bias-free 1→10→1 net has 20 weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaNetParams {
    /// `[hidden × 1]`
    pub w1: Tensor,
    pub b1: Option<Tensor>,
    /// `[1 × hidden]`
    pub w2: Tensor,
    pub b2: Option<Tensor>,
    pub hidden_activation: Activation,
}

impl BetaNetParams {
    pub fn build(hidden: usize, bias: bool, init: Init, rng: &mut Rng) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::contract("beta net needs a hidden layer"));
        }
        Ok(BetaNetParams {
            w1: init.matrix(hidden, 1, rng),
            b1: bias.then(|| Tensor::zeros(&[hidden])),
            w2: init.matrix(1, hidden, rng),
            b2: bias.then(|| Tensor::zeros(&[1])),
            hidden_activation: Activation::Softplus,
        })
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    /// Records `beta_K` as a one-element node.
    pub fn record(&self, tape: &mut Tape, ids: &[NodeId], k: usize) -> Result<NodeId> {
        if k == 0 {
            return Err(Error::contract("beta_K is undefined for K = 0"));
        }
        let x = tape.leaf(Tensor::matrix(1, 1, vec![k as f64])?);
        let mut cursor = 0;
        let mut h = tape.matmul_bt(x, ids[cursor])?;
        cursor += 1;
        if self.b1.is_some() {
            h = tape.add_row(h, ids[cursor])?;
            cursor += 1;
        }
        h = self.hidden_activation.record(tape, h);
        let mut o = tape.matmul_bt(h, ids[cursor])?;
        cursor += 1;
        if self.b2.is_some() {
            o = tape.add_row(o, ids[cursor])?;
        }
        let o = tape.softplus(o);
        tape.reshape(o, &[1])
    }
}

impl Parameterized for BetaNetParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.w1];
        out.extend(self.b1.as_ref());
        out.push(&self.w2);
        out.extend(self.b2.as_ref());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w1];
        out.extend(self.b1.as_mut());
        out.push(&mut self.w2);
        out.extend(self.b2.as_mut());
        out
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["beta.w1".to_string()];
        if self.b1.is_some() {
            out.push("beta.b1".into());
        }
        out.push("beta.w2".into());
        if self.b2.is_some() {
            out.push("beta.b2".into());
        }
        out
    }
}

impl ParamCount for BetaNetParams {
    fn count_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Evaluates `beta_K`. Always positive.
pub fn beta_forward(bp: &BetaNetParams, k: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let ids = bp.bind(&mut tape);
    let out = bp.record(&mut tape, &ids, k)?;
    Ok(tape.value(out).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_net_gives_ln2() {
        let bp = BetaNetParams::build(10, true, Init::Zero, &mut seeded(0)).unwrap();
        for k in [1, 5, 40] {
            assert!((beta_forward(&bp, k).unwrap() - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn bias_free_has_twenty_weights() {
        let bp = BetaNetParams::build(10, false, Init::Uniform, &mut seeded(0)).unwrap();
        assert_eq!(bp.count_params(), 20);
    }

    #[test]
    fn deterministic_and_positive() {
        let bp = BetaNetParams::build(10, true, Init::Uniform, &mut seeded(7)).unwrap();
        for k in 1..50 {
            let b = beta_forward(&bp, k).unwrap();
            assert!(b > 0.0);
            assert_eq!(b, beta_forward(&bp, k).unwrap());
        }
        assert!(beta_forward(&bp, 0).is_err());
    }
}
