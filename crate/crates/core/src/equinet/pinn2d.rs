use serde::{Deserialize, Serialize};

use super::{Init, ParamCount, Parameterized};
use crate::numcore::{matmul, Activation, NodeId, Tape, Tensor};
use crate::rng::Rng;
use crate::{Error, Result};

/// Block dimensions and activation of one PINN-2D layer. A block of `H` goes
/// from `in_rows × in_cols` to `out_rows × out_cols`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer2dSpec {
    pub in_rows: usize,
    pub in_cols: usize,
    pub out_rows: usize,
    pub out_cols: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pinn2dSpec {
    pub layers: Vec<Layer2dSpec>,
}

impl Pinn2dSpec {
    /// Square blocks `dims[0]×dims[0] -> dims[1]×dims[1] -> ...`.
    pub fn square(dims: &[usize], hidden: Activation, output: Activation) -> Self {
        let n = dims.len().saturating_sub(1);
        let layers = (0..n)
            .map(|l| Layer2dSpec {
                in_rows: dims[l],
                in_cols: dims[l],
                out_rows: dims[l + 1],
                out_cols: dims[l + 1],
                activation: if l + 1 == n { output } else { hidden },
            })
            .collect();
        Pinn2dSpec { layers }
    }

    pub fn validate(&self) -> Result<()> {
        for (l, s) in self.layers.iter().enumerate() {
            if s.in_rows == 0 || s.in_cols == 0 || s.out_rows == 0 || s.out_cols == 0 {
                return Err(Error::contract(format!("layer {l} has a zero block dimension")));
            }
            if l > 0 {
                let p = self.layers[l - 1];
                if (p.out_rows, p.out_cols) != (s.in_rows, s.in_cols) {
                    return Err(Error::contract(format!(
                        "layer {l} expects {}×{} blocks but the previous layer emits {}×{}",
                        s.in_rows, s.in_cols, p.out_rows, p.out_cols
                    )));
                }
            }
        }
        Ok(())
    }
}

impl ParamCount for Pinn2dSpec {
    fn count_params(&self) -> usize {
        self.layers
            .iter()
            .map(|s| 2 * s.out_rows * s.in_rows + 2 * s.out_cols * s.in_cols)
            .sum()
    }
}

/// `a`, `b` are `[out_rows × in_rows]`; `c`, `d` are `[out_cols × in_cols]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pinn2dLayer {
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub d: Tensor,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pinn2dParams {
    pub layers: Vec<Pinn2dLayer>,
}

pub fn build_pinn2d(spec: &Pinn2dSpec, init: Init, rng: &mut Rng) -> Result<Pinn2dParams> {
    spec.validate()?;
    let layers = spec
        .layers
        .iter()
        .map(|s| Pinn2dLayer {
            a: init.matrix(s.out_rows, s.in_rows, rng),
            b: init.matrix(s.out_rows, s.in_rows, rng),
            c: init.matrix(s.out_cols, s.in_cols, rng),
            d: init.matrix(s.out_cols, s.in_cols, rng),
            activation: s.activation,
        })
        .collect();
    Ok(Pinn2dParams { layers })
}

impl Pinn2dParams {
    pub fn spec(&self) -> Pinn2dSpec {
        Pinn2dSpec {
            layers: self
                .layers
                .iter()
                .map(|l| Layer2dSpec {
                    in_rows: l.a.shape()[1],
                    in_cols: l.c.shape()[1],
                    out_rows: l.a.shape()[0],
                    out_cols: l.c.shape()[0],
                    activation: l.activation,
                })
                .collect(),
        }
    }

    /// Input block `(rows, cols)`.
    pub fn in_block(&self) -> (usize, usize) {
        self.layers
            .first()
            .map_or((0, 0), |l| (l.a.shape()[1], l.c.shape()[1]))
    }

    pub fn out_block(&self) -> (usize, usize) {
        self.layers
            .last()
            .map_or((0, 0), |l| (l.a.shape()[0], l.c.shape()[0]))
    }

    /// Records all layers on blocks `h [batch, k, k, r, c]` and returns the
    /// final `[batch, k, k, r_out, c_out]` node (no readout).
    pub fn record(
        &self,
        tape: &mut Tape,
        ids: &[NodeId],
        h: NodeId,
        beta: Option<NodeId>,
    ) -> Result<NodeId> {
        let s = tape.value(h).shape().to_vec();
        if s.len() != 5 || (s[3], s[4]) != self.in_block() {
            return Err(Error::shape(format!(
                "blocks {s:?} do not match input block {:?}",
                self.in_block()
            )));
        }
        if s[1] == 0 {
            return Err(Error::contract("PINN-2D needs at least one block"));
        }
        let mut h = h;
        for (l, layer) in self.layers.iter().enumerate() {
            let p = &ids[4 * l..4 * l + 4];
            let pre = tape.block_bilinear(h, p[0], p[1], p[2], p[3], beta)?;
            h = layer.activation.record(tape, pre);
        }
        Ok(h)
    }

    /// Like [`Pinn2dParams::record`] followed by the diagonal readout, giving
    /// `[batch, k·r_out·c_out]`. When `last_pre_activation` is set the last
    /// layer's activation is skipped.
    pub fn record_readout(
        &self,
        tape: &mut Tape,
        ids: &[NodeId],
        h: NodeId,
        beta: Option<NodeId>,
        last_pre_activation: bool,
    ) -> Result<NodeId> {
        if !last_pre_activation {
            let out = self.record(tape, ids, h, beta)?;
            return tape.diag_blocks(out);
        }
        let n = self.layers.len();
        if n == 0 {
            return tape.diag_blocks(h);
        }
        let head = Pinn2dParams { layers: self.layers[..n - 1].to_vec() };
        let mut cur = if n > 1 { head.record(tape, ids, h, beta)? } else { h };
        let p = &ids[4 * (n - 1)..4 * n];
        cur = tape.block_bilinear(cur, p[0], p[1], p[2], p[3], beta)?;
        tape.diag_blocks(cur)
    }
}

impl Parameterized for Pinn2dParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.a, &l.b, &l.c, &l.d])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.a, &mut l.b, &mut l.c, &mut l.d])
            .collect()
    }

    fn tensor_names(&self) -> Vec<String> {
        (1..=self.layers.len())
            .flat_map(|i| ["A", "B", "C", "D"].map(|m| format!("layer{i}.{m}")))
            .collect()
    }
}

impl ParamCount for Pinn2dParams {
    fn count_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Rearranges a natural `[batch?, k·r, k·c]` matrix into `[batch, k, k, r, c]`.
pub(crate) fn to_blocks(x: &Tensor, k: usize, r: usize, c: usize) -> Result<Tensor> {
    let (kr, kc) = (k * r, k * c);
    let batch = match x.shape() {
        [rows, cols] if *rows == kr && *cols == kc => 1,
        [b, rows, cols] if *rows == kr && *cols == kc => *b,
        s => {
            return Err(Error::shape(format!(
                "input {s:?} is not a {k}×{k} grid of {r}×{c} blocks"
            )))
        }
    };
    if r == 1 && c == 1 {
        // row-major natural layout already is block-major
        return x.reshape(&[batch, k, k, 1, 1]);
    }
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..batch {
        let base = bi * kr * kc;
        for m in 0..k {
            for n in 0..k {
                for i in 0..r {
                    let row = base + (m * r + i) * kc + n * c;
                    out.extend_from_slice(&src[row..row + c]);
                }
            }
        }
    }
    Tensor::new(vec![batch, k, k, r, c], out)
}

/// Forward pass on `x` of shape `[k·r, k·c]` or `[batch, k·r, k·c]`.
///
/// Returns the concatenated diagonal blocks of the last layer, `[k·r'·c']`
/// (or `[batch, k·r'·c']`). `beta` multiplies `A` and `C` in every layer.
pub fn pinn2d_forward(
    params: &Pinn2dParams,
    x: &Tensor,
    k: usize,
    beta: Option<f64>,
) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::contract("PINN-2D needs at least one block"));
    }
    let (r, c) = params.in_block();
    let blocks = to_blocks(x, k, r, c)?;
    let batch = blocks.shape()[0];
    let mut tape = Tape::new();
    let ids = params.bind(&mut tape);
    let h = tape.leaf(blocks);
    let beta = beta.map(|b| tape.leaf(Tensor::scalar(b)));
    let y = params.record_readout(&mut tape, &ids, h, beta, false)?;
    let y = tape.value(y).clone();
    if x.ndim() == 2 {
        let n = y.len();
        y.into_reshape(&[n])
    } else {
        let n = y.len() / batch;
        y.into_reshape(&[batch, n])
    }
}

/// One materialized layer: `H <- g(P·H·Qᵀ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer2d {
    pub p: Tensor,
    pub q: Tensor,
    pub activation: Activation,
}

fn block_pattern(diag: &Tensor, off: &Tensor, k: usize) -> Tensor {
    let (ro, ci) = (diag.shape()[0], diag.shape()[1]);
    let cols = k * ci;
    let mut w = Tensor::zeros(&[k * ro, cols]);
    for bm in 0..k {
        for bn in 0..k {
            let src = if bm == bn { diag } else { off };
            for i in 0..ro {
                for j in 0..ci {
                    w.set2(bm * ro + i, bn * ci + j, src.at2(i, j));
                }
            }
        }
    }
    w
}

/// Materializes `P` (`A` on the diagonal, `B` elsewhere) and `Q` (`C`, `D`)
/// for every layer.
pub fn expand_2d_to_dense(params: &Pinn2dParams, k: usize) -> Result<Vec<DenseLayer2d>> {
    if k == 0 {
        return Err(Error::contract("expansion needs at least one block"));
    }
    Ok(params
        .layers
        .iter()
        .map(|l| DenseLayer2d {
            p: block_pattern(&l.a, &l.b, k),
            q: block_pattern(&l.c, &l.d, k),
            activation: l.activation,
        })
        .collect())
}

/// Evaluates materialized layers on one natural `[k·r, k·c]` matrix and reads
/// out the diagonal blocks.
pub fn dense_2d_forward(layers: &[DenseLayer2d], x: &Tensor, k: usize) -> Result<Tensor> {
    if x.ndim() != 2 || k == 0 || x.shape()[0] % k != 0 || x.shape()[1] % k != 0 {
        return Err(Error::shape(format!("{:?} is not a {k}×{k} block grid", x.shape())));
    }
    let mut h = x.clone();
    for l in layers {
        let ph = matmul(&l.p, &h)?;
        let pre = matmul(&ph, &l.q.transpose()?)?;
        h = pre.map(|v| l.activation.apply(v));
    }
    let (r, c) = (h.shape()[0] / k, h.shape()[1] / k);
    let mut out = Vec::with_capacity(k * r * c);
    for m in 0..k {
        for i in 0..r {
            for j in 0..c {
                out.push(h.at2(m * r + i, m * c + j));
            }
        }
    }
    Ok(Tensor::vector(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equinet::{permute_blocks_1d, permute_blocks_2d, BlockPermutation};
    use crate::rng::seeded;

    fn scalar(a: f64, b: f64, c: f64, d: f64) -> Pinn2dParams {
        let s = |v| Tensor::from_rows(&[&[v]]);
        Pinn2dParams {
            layers: vec![Pinn2dLayer {
                a: s(a),
                b: s(b),
                c: s(c),
                d: s(d),
                activation: Activation::Identity,
            }],
        }
    }

    #[test]
    fn hand_case_k2() {
        let p = scalar(1.0, 2.0, 1.0, 3.0);
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(pinn2d_forward(&p, &x, 2, None).unwrap().data(), &[37.0, 23.0]);
        let swapped = Tensor::from_rows(&[&[4.0, 3.0], &[2.0, 1.0]]);
        assert_eq!(pinn2d_forward(&p, &swapped, 2, None).unwrap().data(), &[23.0, 37.0]);
    }

    #[test]
    fn single_block() {
        let p = scalar(2.0, 9.0, 3.0, 9.0);
        let y = pinn2d_forward(&p, &Tensor::from_rows(&[&[0.5]]), 1, None).unwrap();
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn count_of_table_sized_model() {
        let spec = Pinn2dSpec::square(&[1, 3, 3, 1], Activation::Relu, Activation::Identity);
        assert_eq!(spec.count_params(), 60);
        let p = build_pinn2d(&spec, Init::Uniform, &mut seeded(0)).unwrap();
        assert_eq!(p.count_params(), 60);
    }

    #[test]
    fn zero_init_and_replay() {
        let spec = Pinn2dSpec::square(&[1, 2, 1], Activation::Softplus, Activation::Identity);
        let z = build_pinn2d(&spec, Init::Zero, &mut seeded(1)).unwrap();
        assert!(z.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        let a = build_pinn2d(&spec, Init::Uniform, &mut seeded(3)).unwrap();
        assert_eq!(a, build_pinn2d(&spec, Init::Uniform, &mut seeded(3)).unwrap());
        let s1 = Pinn2dSpec::square(&[1, 1], Activation::Identity, Activation::Identity);
        let one = build_pinn2d(&s1, Init::Uniform, &mut seeded(3)).unwrap();
        assert!(one.tensors().iter().all(|t| t.len() == 1));
    }

    #[test]
    fn dense_layout() {
        let p = scalar(1.0, 2.0, 3.0, 4.0);
        let d = expand_2d_to_dense(&p, 2).unwrap();
        assert_eq!(d[0].p.data(), &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(d[0].q.data(), &[3.0, 4.0, 4.0, 3.0]);
        let d1 = expand_2d_to_dense(&p, 1).unwrap();
        assert_eq!(d1[0].p, p.layers[0].a);
        assert_eq!(d1[0].q, p.layers[0].c);
    }

    #[test]
    fn dense_matches_blockwise_with_rectangular_blocks() {
        let spec = Pinn2dSpec {
            layers: vec![
                Layer2dSpec { in_rows: 2, in_cols: 1, out_rows: 3, out_cols: 2, activation: Activation::Softplus },
                Layer2dSpec { in_rows: 3, in_cols: 2, out_rows: 1, out_cols: 2, activation: Activation::Sigmoid },
            ],
        };
        let mut rng = seeded(8);
        let p = build_pinn2d(&spec, Init::Uniform, &mut rng).unwrap();
        for k in 1..5 {
            let x = Init::Uniform.matrix(2 * k, k, &mut rng);
            let blockwise = pinn2d_forward(&p, &x, k, None).unwrap();
            let dense = dense_2d_forward(&expand_2d_to_dense(&p, k).unwrap(), &x, k).unwrap();
            assert!(blockwise.max_abs_diff(&dense) < 1e-12, "k={k}");
        }
    }

    #[test]
    fn beta_one_is_unadapted() {
        let spec = Pinn2dSpec::square(&[1, 3, 1], Activation::Softplus, Activation::Identity);
        let mut rng = seeded(2);
        let p = build_pinn2d(&spec, Init::Uniform, &mut rng).unwrap();
        let x = Init::Uniform.matrix(4, 4, &mut rng);
        assert_eq!(
            pinn2d_forward(&p, &x, 4, None).unwrap(),
            pinn2d_forward(&p, &x, 4, Some(1.0)).unwrap()
        );
    }

    #[test]
    fn equivariant_with_rectangular_blocks() {
        let spec = Pinn2dSpec {
            layers: vec![Layer2dSpec { in_rows: 2, in_cols: 3, out_rows: 2, out_cols: 1, activation: Activation::Softplus }],
        };
        let mut rng = seeded(4);
        let p = build_pinn2d(&spec, Init::Uniform, &mut rng).unwrap();
        let x = Init::Uniform.matrix(8, 12, &mut rng);
        let perm = BlockPermutation::random(4, &mut rng);
        let lhs = pinn2d_forward(&p, &permute_blocks_2d(&x, &perm, (2, 3)).unwrap(), 4, Some(1.3)).unwrap();
        let rhs = permute_blocks_1d(&pinn2d_forward(&p, &x, 4, Some(1.3)).unwrap(), &perm, 2).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn batched_matches_single() {
        let spec = Pinn2dSpec::square(&[1, 2, 1], Activation::Softplus, Activation::Identity);
        let mut rng = seeded(6);
        let p = build_pinn2d(&spec, Init::Uniform, &mut rng).unwrap();
        let x0 = Init::Uniform.matrix(3, 3, &mut rng);
        let x1 = Init::Uniform.matrix(3, 3, &mut rng);
        let mut both = x0.data().to_vec();
        both.extend_from_slice(x1.data());
        let batched = pinn2d_forward(&p, &Tensor::new(vec![2, 3, 3], both).unwrap(), 3, None).unwrap();
        assert_eq!(&batched.data()[..3], pinn2d_forward(&p, &x0, 3, None).unwrap().data());
        assert_eq!(&batched.data()[3..], pinn2d_forward(&p, &x1, 3, None).unwrap().data());
    }

    #[test]
    fn rejects_bad_grid() {
        let p = scalar(1.0, 1.0, 1.0, 1.0);
        assert!(pinn2d_forward(&p, &Tensor::zeros(&[2, 3]), 2, None).is_err());
        assert!(pinn2d_forward(&p, &Tensor::zeros(&[2, 2]), 0, None).is_err());
    }
}
