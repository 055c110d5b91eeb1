//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and the ids of its
//! inputs, so the tape is topologically ordered by construction. `backward`
//! walks it once in reverse. Only first-order gradients of a scalar output
//! are supported.
//!
//! Besides generic elementwise and matrix operations the tape has two fused
//! operations for the structured layers (`block_bilinear` for PINN-2D and
//! `batch_norm`), because expressing them through the generic set would need
//! axis permutations the rest of the crate never uses.

use super::tensor::{gemm, strided_gemm_acc, sigmoid_scalar, softplus_scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Saved state of a [`Tape::block_bilinear`] node.
#[derive(Debug, Clone)]
struct BlockBilinearSaved {
    h: NodeId,
    a: NodeId,
    b: NodeId,
    c: NodeId,
    d: NodeId,
    beta: Option<NodeId>,
    dims: BlockDims,
    /// Column-block sums of the input, `[batch, k, r_in, c_in]`.
    s1: Vec<f64>,
    /// Left-multiplied blocks, `[batch, k, k, r_out, c_in]`.
    z: Vec<f64>,
    /// Row-block sums of `z`, `[batch, k, r_out, c_in]`.
    s2: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct BlockDims {
    batch: usize,
    k: usize,
    r_in: usize,
    c_in: usize,
    r_out: usize,
    c_out: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow { x: NodeId, bias: NodeId },
    MulCol { x: NodeId, col: NodeId },
    DivCol { x: NodeId, col: NodeId },
    ScaleBy { x: NodeId, s: NodeId },
    Scale { x: NodeId, c: f64 },
    Offset { x: NodeId },
    Softplus(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Square(NodeId),
    Sum(NodeId),
    SumCols(NodeId),
    GroupSumRows { x: NodeId, group: usize },
    RepeatRows { x: NodeId, group: usize },
    Reshape(NodeId),
    BlockBilinear(Box<BlockBilinearSaved>),
    DiagBlocks { h: NodeId, k: usize, block: usize },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Single-owner record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`; zeros if the node does not influence the output.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

/// Per-column batch statistics produced by [`Tape::batch_norm`].
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a leaf: a parameter, an input, or a constant.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        self.value(a).check_same(self.value(b), what)
    }

    /// `a · b` for 2-D `a [m×k]`, `b [k×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for 2-D `a [m×k]`, `b [n×k]`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 {
            return shape_err(format!(
                "matmul expects 2-D operands, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != k2 {
            return shape_err(format!(
                "matmul inner dimensions disagree: {:?} x {:?}{}",
                av.shape(),
                bv.shape(),
                if trans_b { "ᵀ" } else { "" }
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), false, bv.data(), trans_b, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.same_shape(a, b, what)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a length-`cols` bias to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let cols = xv.cols();
        if bv.len() != cols {
            return shape_err(format!(
                "row bias of length {} for {:?}",
                bv.len(),
                xv.shape()
            ));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::AddRow { x, bias }))
    }

    fn col_check(&self, x: NodeId, col: NodeId) -> Result<usize> {
        let (xv, cv) = (self.value(x), self.value(col));
        if cv.len() != xv.rows() {
            return shape_err(format!(
                "column of length {} for {:?}",
                cv.len(),
                xv.shape()
            ));
        }
        Ok(xv.cols())
    }

    /// Multiplies row `i` of `x` by `col[i]`.
    pub fn mul_col(&mut self, x: NodeId, col: NodeId) -> Result<NodeId> {
        let cols = self.col_check(x, col)?;
        let (xv, cv) = (self.value(x), self.value(col));
        let mut out = xv.data().to_vec();
        for (row, c) in out.chunks_mut(cols).zip(cv.data()) {
            row.iter_mut().for_each(|v| *v *= c);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::MulCol { x, col }))
    }

    /// Divides row `i` of `x` by `col[i]`.
    pub fn div_col(&mut self, x: NodeId, col: NodeId) -> Result<NodeId> {
        let cols = self.col_check(x, col)?;
        let (xv, cv) = (self.value(x), self.value(col));
        let mut out = xv.data().to_vec();
        for (row, c) in out.chunks_mut(cols).zip(cv.data()) {
            row.iter_mut().for_each(|v| *v /= c);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::DivCol { x, col }))
    }

    /// Multiplies `x` by a single-element node.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return shape_err(format!(
                "scale_by expects a scalar, got {:?}",
                self.value(s).shape()
            ));
        }
        let c = self.value(s).item();
        let value = self.value(x).scaled(c);
        Ok(self.push(value, Op::ScaleBy { x, s }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).scaled(c);
        self.push(value, Op::Scale { x, c })
    }

    /// `x + c` elementwise.
    pub fn offset(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::Offset { x })
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(softplus_scalar);
        self.push(value, Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid_scalar);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square(x))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Row sums: `[rows × cols] -> [rows × 1]`.
    pub fn sum_cols(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let cols = xv.cols();
        let sums: Vec<f64> = xv.data().chunks(cols).map(|r| r.iter().sum()).collect();
        let rows = sums.len();
        let value = Tensor::new(vec![rows, 1], sums).expect("row sums");
        self.push(value, Op::SumCols(x))
    }

    /// Sums each run of `group` consecutive rows: `[n×m] -> [n/group × m]`.
    pub fn group_sum_rows(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if group == 0 || rows % group != 0 {
            return shape_err(format!("{rows} rows do not split into groups of {group}"));
        }
        let mut out = vec![0.0; rows / group * cols];
        for (r, row) in xv.data().chunks(cols).enumerate() {
            let o = &mut out[(r / group) * cols..(r / group + 1) * cols];
            for (a, b) in o.iter_mut().zip(row) {
                *a += b;
            }
        }
        let value = Tensor::new(vec![rows / group, cols], out)?;
        Ok(self.push(value, Op::GroupSumRows { x, group }))
    }

    /// Repeats every row `group` times consecutively: `[n×m] -> [n·group × m]`.
    pub fn repeat_rows(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        if group == 0 {
            return shape_err("repeat_rows with group 0".into());
        }
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(rows * group * cols);
        for row in xv.data().chunks(cols) {
            for _ in 0..group {
                out.extend_from_slice(row);
            }
        }
        let value = Tensor::new(vec![rows * group, cols], out)?;
        Ok(self.push(value, Op::RepeatRows { x, group }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// One PINN-2D layer `P·H·Qᵀ` evaluated block-wise.
    ///
    /// `h` has shape `[batch, k, k, r_in, c_in]`. `P` has `beta·A` on its
    /// diagonal blocks and `B` elsewhere; `Q` likewise with `beta·C`, `D`.
    /// `a`, `b` are `[r_out × r_in]`; `c`, `d` are `[c_out × c_in]`. Cost is
    /// linear in the number of blocks.
    #[allow(clippy::too_many_arguments)]
    pub fn block_bilinear(
        &mut self,
        h: NodeId,
        a: NodeId,
        b: NodeId,
        c: NodeId,
        d: NodeId,
        beta: Option<NodeId>,
    ) -> Result<NodeId> {
        let hv = self.value(h);
        if hv.ndim() != 5 || hv.shape()[1] != hv.shape()[2] {
            return shape_err(format!(
                "block_bilinear expects [batch, k, k, r, c], got {:?}",
                hv.shape()
            ));
        }
        let (av, bv, cv, dv) = (self.value(a), self.value(b), self.value(c), self.value(d));
        let s = hv.shape();
        let dims = BlockDims {
            batch: s[0],
            k: s[1],
            r_in: s[3],
            c_in: s[4],
            r_out: av.shape()[0],
            c_out: cv.shape()[0],
        };
        if av.shape() != [dims.r_out, dims.r_in] || bv.shape() != av.shape() {
            return shape_err(format!(
                "left factors {:?}/{:?} do not match block rows {}",
                av.shape(),
                bv.shape(),
                dims.r_in
            ));
        }
        if cv.shape() != [dims.c_out, dims.c_in] || dv.shape() != cv.shape() {
            return shape_err(format!(
                "right factors {:?}/{:?} do not match block cols {}",
                cv.shape(),
                dv.shape(),
                dims.c_in
            ));
        }
        let beta_v = match beta {
            Some(id) => {
                let t = self.value(id);
                if t.len() != 1 {
                    return shape_err(format!("beta must be scalar, got {:?}", t.shape()));
                }
                t.item()
            }
            None => 1.0,
        };
        let at: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(a, b)| beta_v * a - b)
            .collect();
        let ct: Vec<f64> = cv
            .data()
            .iter()
            .zip(dv.data())
            .map(|(c, d)| beta_v * c - d)
            .collect();
        let BlockDims { batch, k, r_in, c_in, r_out, c_out } = dims;
        let hb = r_in * c_in;
        let zb = r_out * c_in;
        let ob = r_out * c_out;
        let hd = hv.data();
        let bd = bv.data();
        let dd = dv.data();

        let nb = batch * k * k;
        let mut s1 = vec![0.0; batch * k * hb];
        for bi in 0..batch {
            for m in 0..k {
                for n in 0..k {
                    let src = &hd[((bi * k + m) * k + n) * hb..][..hb];
                    let dst = &mut s1[(bi * k + n) * hb..][..hb];
                    dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
                }
            }
        }
        // Z_mn = At·H_mn + B·s1_n
        let mut z = vec![0.0; nb * zb];
        stack_left(&at, r_out, r_in, hd, c_in, &mut z);
        let mut bs1 = vec![0.0; batch * k * zb];
        stack_left(bd, r_out, r_in, &s1, c_in, &mut bs1);
        broadcast_rows(&mut z, &bs1, batch, k, zb, false);
        let mut s2 = vec![0.0; batch * k * zb];
        for (acc, row) in s2.chunks_exact_mut(zb).zip(z.chunks_exact(k * zb)) {
            for blk in row.chunks_exact(zb) {
                acc.iter_mut().zip(blk).for_each(|(o, v)| *o += v);
            }
        }
        // O_mn = Z_mn·Ctᵀ + s2_m·Dᵀ, stacked blocks form one tall matrix
        let mut out = vec![0.0; nb * ob];
        gemm(nb * r_out, c_in, c_out, 1.0, &z, false, &ct, true, 0.0, &mut out);
        let mut s2d = vec![0.0; batch * k * ob];
        gemm(batch * k * r_out, c_in, c_out, 1.0, &s2, false, dd, true, 0.0, &mut s2d);
        broadcast_rows(&mut out, &s2d, batch, k, ob, true);
        let value = Tensor::new(vec![batch, k, k, r_out, c_out], out)?;
        let saved = BlockBilinearSaved { h, a, b, c, d, beta, dims, s1, z, s2 };
        Ok(self.push(value, Op::BlockBilinear(Box::new(saved))))
    }

    /// Concatenates the diagonal blocks of `[batch, k, k, r, c]` into
    /// `[batch, k·r·c]`.
    pub fn diag_blocks(&mut self, h: NodeId) -> Result<NodeId> {
        let hv = self.value(h);
        if hv.ndim() != 5 || hv.shape()[1] != hv.shape()[2] {
            return shape_err(format!(
                "diag_blocks expects [batch, k, k, r, c], got {:?}",
                hv.shape()
            ));
        }
        let s = hv.shape();
        let (batch, k, block) = (s[0], s[1], s[3] * s[4]);
        let mut out = Vec::with_capacity(batch * k * block);
        for bi in 0..batch {
            for m in 0..k {
                out.extend_from_slice(&hv.data()[((bi * k + m) * k + m) * block..][..block]);
            }
        }
        let value = Tensor::new(vec![batch, k * block], out)?;
        Ok(self.push(value, Op::DiagBlocks { h, k, block }))
    }

    /// Training-mode batch normalization of the columns of `x [n × f]`.
    ///
    /// Returns the output node and the batch statistics (biased variance),
    /// which the caller folds into its running averages.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats)> {
        let xv = self.value(x);
        let (n, f) = (xv.rows(), xv.cols());
        if n < 2 {
            return Err(Error::contract(
                "batch normalization in training mode needs a batch of at least 2",
            ));
        }
        if self.value(gamma).len() != f || self.value(beta).len() != f {
            return shape_err(format!(
                "batch_norm scale/shift must have {f} entries"
            ));
        }
        let data = xv.data();
        let mut mean = vec![0.0; f];
        for row in data.chunks(f) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; f];
        for row in data.chunks(f) {
            for j in 0..f {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * f];
        let mut out = vec![0.0; n * f];
        for i in 0..n {
            for j in 0..f {
                let xh = (data[i * f + j] - mean[j]) * inv_std[j];
                xhat[i * f + j] = xh;
                out[i * f + j] = g[j] * xh + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let id = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std });
        Ok((id, BatchStats { mean, var }))
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::new(self.value(output).shape().to_vec(), vec![1.0])?);
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = out.shape()[1];
                // dA = G · op(B)ᵀ
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, 1.0, g.data(), false, bv.data(), !*trans_b, 0.0, &mut ga);
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
                // dB = Aᵀ · G, or (Aᵀ · G)ᵀ = Gᵀ · A when B enters transposed
                let mut gb = vec![0.0; k * n];
                if *trans_b {
                    gemm(n, m, k, 1.0, g.data(), true, av.data(), false, 0.0, &mut gb);
                } else {
                    gemm(k, m, n, 1.0, av.data(), true, g.data(), false, 0.0, &mut gb);
                }
                accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.zip_map(bv, |g, y| g * y)?);
                accumulate(grads, *b, g.zip_map(av, |g, x| g * x)?);
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                accumulate(grads, *a, g.zip_map(bv, |g, y| g / y)?);
                // d(a/b)/db = -(a/b)/b
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(bv.data())
                    .map(|((g, q), y)| -g * q / y)
                    .collect();
                accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
            }
            Op::AddRow { x, bias } => {
                let cols = out.cols();
                let mut gb = vec![0.0; cols];
                for row in g.data().chunks(cols) {
                    gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                accumulate(grads, *x, g.clone());
                let bshape = self.value(*bias).shape().to_vec();
                accumulate(grads, *bias, Tensor::new(bshape, gb)?);
            }
            Op::MulCol { x, col } => {
                let (xv, cv) = (self.value(*x), self.value(*col));
                let cols = xv.cols();
                let mut gx = g.data().to_vec();
                let mut gc = vec![0.0; cv.len()];
                for (i, (grow, xrow)) in gx.chunks_mut(cols).zip(xv.data().chunks(cols)).enumerate() {
                    gc[i] = grow.iter().zip(xrow).map(|(a, b)| a * b).sum();
                    grow.iter_mut().for_each(|v| *v *= cv.data()[i]);
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                accumulate(grads, *col, Tensor::new(cv.shape().to_vec(), gc)?);
            }
            Op::DivCol { x, col } => {
                let (xv, cv) = (self.value(*x), self.value(*col));
                let cols = xv.cols();
                let mut gx = g.data().to_vec();
                let mut gc = vec![0.0; cv.len()];
                for (i, (grow, orow)) in gx.chunks_mut(cols).zip(out.data().chunks(cols)).enumerate() {
                    let c = cv.data()[i];
                    gc[i] = -grow.iter().zip(orow).map(|(a, q)| a * q).sum::<f64>() / c;
                    grow.iter_mut().for_each(|v| *v /= c);
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                accumulate(grads, *col, Tensor::new(cv.shape().to_vec(), gc)?);
            }
            Op::ScaleBy { x, s } => {
                let sv = self.value(*s);
                let xv = self.value(*x);
                accumulate(grads, *x, g.scaled(sv.item()));
                let gs = g.dot(xv);
                accumulate(grads, *s, Tensor::new(sv.shape().to_vec(), vec![gs])?);
            }
            Op::Scale { x, c } => accumulate(grads, *x, g.scaled(*c)),
            Op::Offset { x } => accumulate(grads, *x, g.clone()),
            Op::Softplus(x) => {
                let gx = g.zip_map(self.value(*x), |g, v| g * sigmoid_scalar(v))?;
                accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(out, |g, s| g * s * (1.0 - s))?;
                accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 })?;
                accumulate(grads, *x, gx);
            }
            Op::Square(x) => {
                let gx = g.zip_map(self.value(*x), |g, v| 2.0 * g * v)?;
                accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape();
                accumulate(grads, *x, Tensor::filled(shape, g.item()));
            }
            Op::SumCols(x) => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut gx = Vec::with_capacity(xv.len());
                for &gi in g.data() {
                    gx.extend(std::iter::repeat_n(gi, cols));
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::GroupSumRows { x, group } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut gx = Vec::with_capacity(xv.len());
                for grow in g.data().chunks(cols) {
                    for _ in 0..*group {
                        gx.extend_from_slice(grow);
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::RepeatRows { x, group } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut gx = vec![0.0; xv.len()];
                for (r, grow) in g.data().chunks(cols).enumerate() {
                    let o = &mut gx[(r / group) * cols..][..cols];
                    o.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape();
                accumulate(grads, *x, g.reshape(shape)?);
            }
            Op::DiagBlocks { h, k, block } => {
                let hv = self.value(*h);
                let batch = hv.shape()[0];
                let mut gh = vec![0.0; hv.len()];
                for bi in 0..batch {
                    for m in 0..*k {
                        let src = &g.data()[(bi * k + m) * block..][..*block];
                        gh[((bi * k + m) * k + m) * block..][..*block].copy_from_slice(src);
                    }
                }
                accumulate(grads, *h, Tensor::new(hv.shape().to_vec(), gh)?);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let xv = self.value(*x);
                let (n, f) = (xv.rows(), xv.cols());
                let gam = self.value(*gamma);
                let gd = g.data();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for i in 0..n {
                    for j in 0..f {
                        dgamma[j] += gd[i * f + j] * xhat[i * f + j];
                        dbeta[j] += gd[i * f + j];
                    }
                }
                // dxhat = g·gamma; dx = inv_std/n · (n·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                let mut gx = vec![0.0; n * f];
                for j in 0..f {
                    let gj = gam.data()[j];
                    let sum_dxhat = dbeta[j] * gj;
                    let sum_dxhat_xhat = dgamma[j] * gj;
                    for i in 0..n {
                        let dxh = gd[i * f + j] * gj;
                        gx[i * f + j] = inv_std[j] / n as f64
                            * (n as f64 * dxh - sum_dxhat - xhat[i * f + j] * sum_dxhat_xhat);
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                accumulate(grads, *gamma, Tensor::new(gam.shape().to_vec(), dgamma)?);
                let bshape = self.value(*beta).shape().to_vec();
                accumulate(grads, *beta, Tensor::new(bshape, dbeta)?);
            }
            Op::BlockBilinear(saved) => self.block_bilinear_backward(saved, g, grads)?,
        }
        Ok(())
    }

    fn block_bilinear_backward(
        &self,
        sv: &BlockBilinearSaved,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let BlockDims { batch, k, r_in, c_in, r_out, c_out } = sv.dims;
        let (av, bv, cv, dv) = (
            self.value(sv.a),
            self.value(sv.b),
            self.value(sv.c),
            self.value(sv.d),
        );
        let beta_v = sv.beta.map_or(1.0, |id| self.value(id).item());
        let at: Vec<f64> = av.data().iter().zip(bv.data()).map(|(a, b)| beta_v * a - b).collect();
        let ct: Vec<f64> = cv.data().iter().zip(dv.data()).map(|(c, d)| beta_v * c - d).collect();
        let hb = r_in * c_in;
        let zb = r_out * c_in;
        let ob = r_out * c_out;
        let gd = g.data();
        let hd = self.value(sv.h).data();

        let nb = batch * k * k;
        let mut grow = vec![0.0; batch * k * ob];
        for (acc, row) in grow.chunks_exact_mut(ob).zip(gd.chunks_exact(k * ob)) {
            for blk in row.chunks_exact(ob) {
                acc.iter_mut().zip(blk).for_each(|(o, v)| *o += v);
            }
        }
        // O = Z·Ctᵀ + s2·Dᵀ  =>  dCt = Gᵀ·Z, dD = growᵀ·s2, dZ = G·Ct + grow·D
        let mut d_ct = vec![0.0; c_out * c_in];
        gemm(c_out, nb * r_out, c_in, 1.0, gd, true, &sv.z, false, 0.0, &mut d_ct);
        let mut d_d = vec![0.0; c_out * c_in];
        gemm(c_out, batch * k * r_out, c_in, 1.0, &grow, true, &sv.s2, false, 0.0, &mut d_d);
        let mut dz = vec![0.0; nb * zb];
        gemm(nb * r_out, c_out, c_in, 1.0, gd, false, &ct, false, 0.0, &mut dz);
        let mut ds2 = vec![0.0; batch * k * zb];
        gemm(batch * k * r_out, c_out, c_in, 1.0, &grow, false, dv.data(), false, 0.0, &mut ds2);
        broadcast_rows(&mut dz, &ds2, batch, k, zb, true);

        let mut dcol = vec![0.0; batch * k * zb];
        for bi in 0..batch {
            for m in 0..k {
                for n in 0..k {
                    let src = &dz[((bi * k + m) * k + n) * zb..][..zb];
                    let dst = &mut dcol[(bi * k + n) * zb..][..zb];
                    dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
                }
            }
        }
        // Z = At·H + B·s1  =>  dAt = Σ dZ·Hᵀ, dB = Σ dcol·s1ᵀ, dH = Atᵀ·dZ + Bᵀ·dcol
        let mut d_at = vec![0.0; r_out * r_in];
        stack_gram(&dz, r_out, hd, r_in, c_in, &mut d_at);
        let mut d_b = vec![0.0; r_out * r_in];
        stack_gram(&dcol, r_out, &sv.s1, r_in, c_in, &mut d_b);
        let mut dh = vec![0.0; nb * hb];
        stack_left(&transposed(&at, r_out, r_in), r_in, r_out, &dz, c_in, &mut dh);
        let mut btd = vec![0.0; batch * k * hb];
        stack_left(&transposed(bv.data(), r_out, r_in), r_in, r_out, &dcol, c_in, &mut btd);
        broadcast_rows(&mut dh, &btd, batch, k, hb, false);

        let d_a: Vec<f64> = d_at.iter().map(|v| beta_v * v).collect();
        d_b.iter_mut().zip(&d_at).for_each(|(b, a)| *b -= a);
        let d_c: Vec<f64> = d_ct.iter().map(|v| beta_v * v).collect();
        d_d.iter_mut().zip(&d_ct).for_each(|(d, c)| *d -= c);
        if let Some(beta) = sv.beta {
            let d_beta: f64 = d_at.iter().zip(av.data()).map(|(x, y)| x * y).sum::<f64>()
                + d_ct.iter().zip(cv.data()).map(|(x, y)| x * y).sum::<f64>();
            let shape = self.value(beta).shape().to_vec();
            accumulate(grads, beta, Tensor::new(shape, vec![d_beta])?);
        }
        let hshape = self.value(sv.h).shape().to_vec();
        accumulate(grads, sv.h, Tensor::new(hshape, dh)?);
        accumulate(grads, sv.a, Tensor::new(av.shape().to_vec(), d_a)?);
        accumulate(grads, sv.b, Tensor::new(bv.shape().to_vec(), d_b)?);
        accumulate(grads, sv.c, Tensor::new(cv.shape().to_vec(), d_c)?);
        accumulate(grads, sv.d, Tensor::new(dv.shape().to_vec(), d_d)?);
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

// Kernels over stacks of small row-major blocks. Column `j` of every block
// in a stack forms a strided matrix, so each kernel is `q` GEMM calls.

/// out_i[p×q] += m[p×r] · x_i[r×q] for every block `i`.
fn stack_left(m: &[f64], p: usize, r: usize, x: &[f64], q: usize, out: &mut [f64]) {
    let n = x.len() / (r * q).max(1);
    if n == 0 {
        return;
    }
    for j in 0..q {
        strided_gemm_acc(
            p,
            r,
            n,
            (m, r, 1),
            (&x[j..], q, r * q),
            (&mut out[j..], q, p * q),
        );
    }
}

/// out[p×l] += Σ_i a_i[p×q] · b_iᵀ where b_i is [l×q].
fn stack_gram(a: &[f64], p: usize, b: &[f64], l: usize, q: usize, out: &mut [f64]) {
    let n = a.len() / (p * q).max(1);
    if n == 0 {
        return;
    }
    for j in 0..q {
        strided_gemm_acc(
            p,
            n,
            l,
            (&a[j..], q, p * q),
            (&b[j..], l * q, q),
            (&mut *out, l, 1),
        );
    }
}

/// Adds `v[bi, j]` to every block `(bi, m, n)` of a `[batch, k, k]` stack,
/// with `j = m` when `by_row` and `j = n` otherwise.
fn broadcast_rows(stack: &mut [f64], v: &[f64], batch: usize, k: usize, block: usize, by_row: bool) {
    let row = k * block;
    for bi in 0..batch {
        let vs = &v[bi * row..][..row];
        for (m, dst) in stack[bi * k * row..][..k * row].chunks_exact_mut(row).enumerate() {
            if by_row {
                let src = &vs[m * block..][..block];
                for blk in dst.chunks_exact_mut(block) {
                    blk.iter_mut().zip(src).for_each(|(o, s)| *o += s);
                }
            } else {
                dst.iter_mut().zip(vs).for_each(|(o, s)| *o += s);
            }
        }
    }
}

fn transposed(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; m.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = m[i * cols + j];
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_chain_gradient_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.scale(x, 1.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).item(), 1.0);
    }

    #[test]
    fn softplus_sum_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let s = tape.softplus(x);
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap().wrt(x);
        assert!(g.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unvisited_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.square(x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).item(), 4.0);
        assert_eq!(grads.wrt(unused), Tensor::zeros(&[3]));
    }

    #[test]
    fn block_bilinear_scalar_hand_case() {
        // K=2 scalar blocks, A=1, B=2, C=1, D=3.
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::new(vec![1, 2, 2, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let a = tape.leaf(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let c = tape.leaf(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let d = tape.leaf(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let o = tape.block_bilinear(h, a, b, c, d, None).unwrap();
        let y = tape.diag_blocks(o).unwrap();
        assert_eq!(tape.value(y).data(), &[37.0, 23.0]);
    }

    #[test]
    fn block_bilinear_rectangular_gradients() {
        use crate::numcore::{finite_diff_grad, relative_error};
        use crate::rng::seeded;
        use rand::Rng as _;
        let mut rng = seeded(3);
        let mut rand = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        // blocks 2×3 in, 4×1 out
        let inputs = vec![
            rand(&[2, 3, 3, 2, 3]),
            rand(&[4, 2]),
            rand(&[4, 2]),
            rand(&[1, 3]),
            rand(&[1, 3]),
            Tensor::vector(vec![0.7]),
        ];
        let loss = |vals: &[Tensor]| {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
            let o = tape.block_bilinear(ids[0], ids[1], ids[2], ids[3], ids[4], Some(ids[5])).unwrap();
            let s = tape.softplus(o);
            let l = tape.sum(s);
            (tape, ids, l)
        };
        let (tape, ids, l) = loss(&inputs);
        let grads = tape.backward(l).unwrap();
        for (slot, &id) in ids.iter().enumerate() {
            let fd = finite_diff_grad(
                |t| {
                    let mut v = inputs.clone();
                    v[slot] = t.clone();
                    let (tape, _, l) = loss(&v);
                    tape.value(l).item()
                },
                &inputs[slot],
                1e-6,
            );
            let err = relative_error(&grads.wrt(id), &fd, 1e-8);
            assert!(err < 1e-6, "input {slot}: {err}");
        }
    }

    #[test]
    fn batch_norm_hand_case_and_small_batch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[&[1.0], &[3.0]]));
        let g = tape.leaf(Tensor::vector(vec![1.0]));
        let b = tape.leaf(Tensor::vector(vec![0.0]));
        let (y, stats) = tape.batch_norm(x, g, b, 1e-5).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-5 && (v[1] - 1.0).abs() < 1e-5);
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![1.0]);

        let one = tape.leaf(Tensor::from_rows(&[&[1.0]]));
        assert!(matches!(tape.batch_norm(one, g, b, 1e-5), Err(Error::Contract(_))));
    }
}
