use serde::{Deserialize, Serialize};

use super::{Init, ParamCount, Parameterized};
use crate::numcore::{Activation, NodeId, Tape, Tensor};
use crate::rng::Rng;
use crate::{Error, Result};

/// Layer widths of a fully connected network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
    pub bias: bool,
}

impl FcSpec {
    pub fn build(&self, init: Init, rng: &mut Rng) -> Result<FcParams> {
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::contract("fully connected widths must be positive"));
        }
        let n = self.widths.len().saturating_sub(1);
        let layers = (0..n)
            .map(|l| FcLayer {
                w: init.matrix(self.widths[l + 1], self.widths[l], rng),
                b: self.bias.then(|| Tensor::zeros(&[self.widths[l + 1]])),
                activation: if l + 1 == n { self.output } else { self.hidden },
            })
            .collect();
        Ok(FcParams { layers })
    }
}

impl ParamCount for FcSpec {
    fn count_params(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[0] * w[1] + if self.bias { w[1] } else { 0 })
            .sum()
    }
}

/// `y = g(W·x + b)` with `w` stored `[out × in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcLayer {
    pub w: Tensor,
    pub b: Option<Tensor>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcParams {
    pub layers: Vec<FcLayer>,
}

impl FcParams {
    pub fn in_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.w.shape()[1])
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.shape()[0])
    }

    /// Records the forward pass of `x [batch × in]`.
    pub fn record(&self, tape: &mut Tape, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let mut cursor = 0;
        for layer in &self.layers {
            let mut pre = tape.matmul_bt(h, ids[cursor])?;
            cursor += 1;
            if layer.b.is_some() {
                pre = tape.add_row(pre, ids[cursor])?;
                cursor += 1;
            }
            h = layer.activation.record(tape, pre);
        }
        Ok(h)
    }

    /// Like [`FcParams::record`] but stops before the last activation.
    pub fn record_pre_activation(
        &self,
        tape: &mut Tape,
        ids: &[NodeId],
        x: NodeId,
    ) -> Result<NodeId> {
        let mut h = x;
        let mut cursor = 0;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut pre = tape.matmul_bt(h, ids[cursor])?;
            cursor += 1;
            if layer.b.is_some() {
                pre = tape.add_row(pre, ids[cursor])?;
                cursor += 1;
            }
            h = if i == last { pre } else { layer.activation.record(tape, pre) };
        }
        Ok(h)
    }
}

impl Parameterized for FcParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.w);
            if let Some(b) = &l.b {
                out.push(b);
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.w);
            if let Some(b) = &mut l.b {
                out.push(b);
            }
        }
        out
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(format!("layer{}.W", i + 1));
            if l.b.is_some() {
                out.push(format!("layer{}.b", i + 1));
            }
        }
        out
    }
}

impl ParamCount for FcParams {
    fn count_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Standard MLP forward on `x` of shape `[in]` or `[batch × in]`.
pub fn fc_forward(params: &FcParams, x: &Tensor) -> Result<Tensor> {
    let width = params.in_width();
    let ok = match x.ndim() {
        1 => x.len() == width,
        2 => x.cols() == width,
        _ => false,
    };
    if !ok {
        return Err(Error::shape(format!(
            "input {:?} does not match input width {width}",
            x.shape()
        )));
    }
    let batch = x.len() / width.max(1);
    let mut tape = Tape::new();
    let ids = params.bind(&mut tape);
    let input = tape.leaf(x.reshape(&[batch, width])?);
    let out = params.record(&mut tape, &ids, input)?;
    let y = tape.value(out).clone();
    if x.ndim() == 1 {
        let n = y.len();
        y.into_reshape(&[n])
    } else {
        Ok(y)
    }
}
