use serde::{Deserialize, Serialize};

use super::fc::{FcLayer, FcParams};
use super::{Init, ParamCount, Parameterized};
use crate::numcore::{Activation, NodeId, Tape, Tensor};
use crate::rng::Rng;
use crate::{Error, Result};

/// Per-block widths and activation of one PINN-1D layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer1dSpec {
    pub in_width: usize,
    pub out_width: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pinn1dSpec {
    pub layers: Vec<Layer1dSpec>,
    pub bias: bool,
}

impl Pinn1dSpec {
    /// Chains `widths[0] -> widths[1] -> ...`, with `hidden` on every layer
    /// but the last.
    pub fn from_widths(widths: &[usize], hidden: Activation, output: Activation, bias: bool) -> Self {
        let n = widths.len().saturating_sub(1);
        let layers = (0..n)
            .map(|l| Layer1dSpec {
                in_width: widths[l],
                out_width: widths[l + 1],
                activation: if l + 1 == n { output } else { hidden },
            })
            .collect();
        Pinn1dSpec { layers, bias }
    }

    pub fn validate(&self) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.in_width == 0 || layer.out_width == 0 {
                return Err(Error::contract(format!("layer {l} has a zero width")));
            }
            if l > 0 && self.layers[l - 1].out_width != layer.in_width {
                return Err(Error::contract(format!(
                    "layer {l} expects block width {} but the previous layer emits {}",
                    layer.in_width,
                    self.layers[l - 1].out_width
                )));
            }
        }
        Ok(())
    }

    pub fn in_width(&self) -> Option<usize> {
        self.layers.first().map(|l| l.in_width)
    }

    pub fn out_width(&self) -> Option<usize> {
        self.layers.last().map(|l| l.out_width)
    }
}

impl ParamCount for Pinn1dSpec {
    fn count_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| 2 * l.in_width * l.out_width + if self.bias { l.out_width } else { 0 })
            .sum()
    }
}

/// Shared sub-matrices of one layer. `u` and `v` are `[out_width × in_width]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pinn1dLayer {
    pub u: Tensor,
    pub v: Tensor,
    pub bias: Option<Tensor>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pinn1dParams {
    pub layers: Vec<Pinn1dLayer>,
}

pub fn build_pinn1d(spec: &Pinn1dSpec, init: Init, rng: &mut Rng) -> Result<Pinn1dParams> {
    spec.validate()?;
    let layers = spec
        .layers
        .iter()
        .map(|l| Pinn1dLayer {
            u: init.matrix(l.out_width, l.in_width, rng),
            v: init.matrix(l.out_width, l.in_width, rng),
            bias: spec.bias.then(|| Tensor::zeros(&[l.out_width])),
            activation: l.activation,
        })
        .collect();
    Ok(Pinn1dParams { layers })
}

impl Pinn1dParams {
    pub fn spec(&self) -> Pinn1dSpec {
        Pinn1dSpec {
            layers: self
                .layers
                .iter()
                .map(|l| Layer1dSpec {
                    in_width: l.u.shape()[1],
                    out_width: l.u.shape()[0],
                    activation: l.activation,
                })
                .collect(),
            bias: self.layers.first().is_some_and(|l| l.bias.is_some()),
        }
    }

    pub fn in_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.u.shape()[1])
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.u.shape()[0])
    }

    /// Records the forward pass.
    ///
    /// `x` holds one block per row, `[batch·k × in_width]`, samples
    /// contiguous. `ids` come from [`Parameterized::bind`]. Returns a node of
    /// shape `[batch·k × out_width]`.
    pub fn record(
        &self,
        tape: &mut Tape,
        ids: &[NodeId],
        x: NodeId,
        k: usize,
        beta: Option<NodeId>,
    ) -> Result<NodeId> {
        if k == 0 {
            return Err(Error::contract("PINN-1D needs at least one block"));
        }
        let xv = tape.value(x);
        if xv.cols() != self.in_width() || xv.rows() % k != 0 {
            return Err(Error::shape(format!(
                "input {:?} is not [batch·{k} × {}]",
                xv.shape(),
                self.in_width()
            )));
        }
        let mut h = x;
        let mut cursor = 0;
        for layer in &self.layers {
            let (u, v) = (ids[cursor], ids[cursor + 1]);
            cursor += 2;
            let u_eff = match beta {
                Some(b) => tape.scale_by(u, b)?,
                None => u,
            };
            // U·h_k + V·Σ_{n≠k} h_n = (U − V)·h_k + V·Σ_n h_n
            let diag = tape.sub(u_eff, v)?;
            let own = tape.matmul_bt(h, diag)?;
            let total = tape.group_sum_rows(h, k)?;
            let shared = tape.matmul_bt(total, v)?;
            let shared = tape.repeat_rows(shared, k)?;
            let mut pre = tape.add(own, shared)?;
            if layer.bias.is_some() {
                pre = tape.add_row(pre, ids[cursor])?;
                cursor += 1;
            }
            h = layer.activation.record(tape, pre);
        }
        Ok(h)
    }
}

impl Parameterized for Pinn1dParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.u);
            out.push(&l.v);
            if let Some(b) = &l.bias {
                out.push(b);
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.u);
            out.push(&mut l.v);
            if let Some(b) = &mut l.bias {
                out.push(b);
            }
        }
        out
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(format!("layer{}.U", i + 1));
            out.push(format!("layer{}.V", i + 1));
            if l.bias.is_some() {
                out.push(format!("layer{}.a", i + 1));
            }
        }
        out
    }
}

impl ParamCount for Pinn1dParams {
    fn count_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Splits `x` into `(batch, flat)` where each flat row holds `k` blocks.
fn batch_rows(x: &Tensor, k: usize, width: usize) -> Result<usize> {
    let per = k * width;
    let ok = match x.ndim() {
        1 => x.len() == per,
        2 => x.cols() == per,
        _ => false,
    };
    if !ok || per == 0 {
        return Err(Error::shape(format!(
            "input {:?} does not hold {k} blocks of width {width}",
            x.shape()
        )));
    }
    Ok(x.len() / per)
}

/// Forward pass on `x` of shape `[k·w]` or `[batch × k·w]`.
///
/// `beta` multiplies `U` in every layer; `None` is the unadapted network
/// (`beta = 1`). The output keeps the input's rank.
pub fn pinn1d_forward(
    params: &Pinn1dParams,
    x: &Tensor,
    k: usize,
    beta: Option<f64>,
) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::contract("PINN-1D needs at least one block"));
    }
    let w = params.in_width();
    let batch = batch_rows(x, k, w)?;
    let mut tape = Tape::new();
    let ids = params.bind(&mut tape);
    let input = tape.leaf(x.reshape(&[batch * k, w])?);
    let beta = beta.map(|b| tape.leaf(Tensor::scalar(b)));
    let out = params.record(&mut tape, &ids, input, k, beta)?;
    let width = params.out_width();
    let y = tape.value(out).clone();
    if x.ndim() == 1 {
        y.into_reshape(&[k * width])
    } else {
        y.into_reshape(&[batch, k * width])
    }
}

/// Materializes the dense `K·out × K·in` weight matrices (`U` on diagonal
/// blocks, `V` elsewhere) and tiles the bias `K` times.
pub fn expand_1d_to_dense(params: &Pinn1dParams, k: usize) -> Result<FcParams> {
    if k == 0 {
        return Err(Error::contract("expansion needs at least one block"));
    }
    let layers = params
        .layers
        .iter()
        .map(|l| {
            let (ro, ci) = (l.u.shape()[0], l.u.shape()[1]);
            let cols = k * ci;
            let mut w = vec![0.0; k * ro * cols];
            for bm in 0..k {
                for bn in 0..k {
                    let src = if bm == bn { &l.u } else { &l.v };
                    for i in 0..ro {
                        for j in 0..ci {
                            w[(bm * ro + i) * cols + bn * ci + j] = src.at2(i, j);
                        }
                    }
                }
            }
            let bias = l.bias.as_ref().map(|b| {
                let tiled: Vec<f64> = (0..k).flat_map(|_| b.data().iter().copied()).collect();
                Tensor::vector(tiled)
            });
            FcLayer {
                w: Tensor::matrix(k * ro, cols, w).expect("sized"),
                b: bias,
                activation: l.activation,
            }
        })
        .collect();
    Ok(FcParams { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equinet::{fc_forward, permute_blocks_1d, BlockPermutation};
    use crate::rng::seeded;

    fn scalar_layer(u: f64, v: f64, act: Activation) -> Pinn1dParams {
        Pinn1dParams {
            layers: vec![Pinn1dLayer {
                u: Tensor::from_rows(&[&[u]]),
                v: Tensor::from_rows(&[&[v]]),
                bias: Some(Tensor::vector(vec![0.0])),
                activation: act,
            }],
        }
    }

    #[test]
    fn hand_case_k2() {
        let p = scalar_layer(2.0, 1.0, Activation::Identity);
        let y = pinn1d_forward(&p, &Tensor::vector(vec![1.0, 3.0]), 2, None).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0]);
        let y = pinn1d_forward(&p, &Tensor::vector(vec![3.0, 1.0]), 2, None).unwrap();
        assert_eq!(y.data(), &[7.0, 5.0]);
    }

    #[test]
    fn single_block_has_no_interference_term() {
        let p = scalar_layer(2.0, 100.0, Activation::Identity);
        let y = pinn1d_forward(&p, &Tensor::vector(vec![1.5]), 1, Some(3.0)).unwrap();
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn scalar_widths_give_scalar_parameters() {
        let spec = Pinn1dSpec::from_widths(&[1, 1, 1], Activation::Softplus, Activation::Identity, true);
        let p = build_pinn1d(&spec, Init::Uniform, &mut seeded(1)).unwrap();
        for l in &p.layers {
            assert_eq!(l.u.len(), 1);
            assert_eq!(l.v.len(), 1);
            assert_eq!(l.bias.as_ref().unwrap().len(), 1);
        }
    }

    #[test]
    fn zero_init_and_seed_replay() {
        let spec = Pinn1dSpec::from_widths(&[3, 4, 2], Activation::Softplus, Activation::Identity, true);
        let z = build_pinn1d(&spec, Init::Zero, &mut seeded(9)).unwrap();
        assert!(z.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        let a = build_pinn1d(&spec, Init::Uniform, &mut seeded(42)).unwrap();
        let b = build_pinn1d(&spec, Init::Uniform, &mut seeded(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inconsistent_spec_is_rejected() {
        let spec = Pinn1dSpec {
            layers: vec![
                Layer1dSpec { in_width: 2, out_width: 3, activation: Activation::Identity },
                Layer1dSpec { in_width: 4, out_width: 1, activation: Activation::Identity },
            ],
            bias: false,
        };
        assert!(build_pinn1d(&spec, Init::Zero, &mut seeded(0)).is_err());
    }

    #[test]
    fn bad_input_sizes() {
        let p = scalar_layer(1.0, 1.0, Activation::Identity);
        assert!(pinn1d_forward(&p, &Tensor::vector(vec![1.0, 2.0, 3.0]), 2, None).is_err());
        assert!(pinn1d_forward(&p, &Tensor::vector(vec![1.0]), 0, None).is_err());
    }

    #[test]
    fn dense_layout_for_three_scalar_blocks() {
        let p = scalar_layer(2.0, 5.0, Activation::Identity);
        let fc = expand_1d_to_dense(&p, 3).unwrap();
        let w = &fc.layers[0].w;
        assert_eq!(
            w.data(),
            &[2.0, 5.0, 5.0, 5.0, 2.0, 5.0, 5.0, 5.0, 2.0]
        );
        let one = expand_1d_to_dense(&p, 1).unwrap();
        assert_eq!(one.layers[0].w, p.layers[0].u);
    }

    #[test]
    fn dense_expansion_matches_structured_forward() {
        let spec = Pinn1dSpec::from_widths(&[3, 5, 4, 2], Activation::Softplus, Activation::Sigmoid, true);
        let mut rng = seeded(5);
        let mut p = build_pinn1d(&spec, Init::Uniform, &mut rng).unwrap();
        for l in &mut p.layers {
            l.bias = Some(Init::Uniform.matrix(1, l.u.shape()[0], &mut rng).into_reshape(&[l.u.shape()[0]]).unwrap());
        }
        for k in 1..6 {
            let x = Init::Uniform.matrix(2, 3 * k, &mut rng);
            let structured = pinn1d_forward(&p, &x, k, None).unwrap();
            let dense = fc_forward(&expand_1d_to_dense(&p, k).unwrap(), &x).unwrap();
            assert!(structured.max_abs_diff(&dense) < 1e-12);
        }
    }

    #[test]
    fn equivariant_under_block_permutation() {
        let spec = Pinn1dSpec::from_widths(&[2, 6, 3], Activation::Softplus, Activation::Identity, true);
        let mut rng = seeded(11);
        let p = build_pinn1d(&spec, Init::Uniform, &mut rng).unwrap();
        let x = Init::Uniform.matrix(1, 10, &mut rng).into_reshape(&[10]).unwrap();
        let perm = BlockPermutation::random(5, &mut rng);
        let lhs = pinn1d_forward(&p, &permute_blocks_1d(&x, &perm, 2).unwrap(), 5, Some(0.7)).unwrap();
        let rhs = permute_blocks_1d(&pinn1d_forward(&p, &x, 5, Some(0.7)).unwrap(), &perm, 3).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }
}
