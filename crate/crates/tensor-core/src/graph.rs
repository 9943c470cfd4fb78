//! The recorded computation tape.
//!
//! Every operation appends a node holding its op id, input node ids, and the
//! computed output values. Gradients produced by [`Graph::backward`] are
//! ordinary nodes on the same tape, so a second backward pass differentiates
//! through them and yields exact second-order derivatives.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

impl Padding {
    fn resolve(self, k: usize) -> usize {
        match self {
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        }
    }
}

/// Op identifiers. Payloads that the backward pass treats as constants
/// (masks, gather indices, scalar factors) live inside the variant.
#[derive(Debug, Clone)]
pub(crate) enum Op<S: Scalar> {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(S),
    AddScalar(S),
    Exp,
    Ln,
    Recip,
    Sqrt,
    Abs,
    Powf(S),
    Relu,
    /// Elementwise product with a constant tensor (relu masks, one-hot picks).
    MulConst(Arc<Vec<S>>),
    Matmul,
    Transpose,
    Conv2d(ConvGeom),
    ConvInputGrad(ConvGeom),
    ConvKernelGrad(ConvGeom),
    /// out[i] = x[idx[i]]
    Gather(Arc<Vec<u32>>),
    /// out[idx[i]] += x[i], zeros elsewhere
    ScatterAdd(Arc<Vec<u32>>),
    /// out row r = x row rows[r]
    RowGather(Arc<Vec<u32>>),
    /// out row rows[r] += x row r, zeros elsewhere
    RowScatterAdd(Arc<Vec<u32>>),
    /// [R,S] -> [R]
    SumLast { cols: usize },
    /// [R] -> [R,S]
    BroadcastLast { cols: usize },
    SumAll,
    BroadcastAll,
    /// [N,C,H,W] -> [C]
    ChannelSum,
    /// [C] -> [N,C,H,W]
    ChannelBroadcast,
    /// [N,K] -> [K]
    SumRows,
    /// [K] -> [N,K]
    BroadcastRows,
    Reshape,
}

#[derive(Debug, Clone)]
pub(crate) struct Node<S: Scalar> {
    pub(crate) op: Op<S>,
    pub(crate) inputs: Vec<NodeId>,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<S>,
    pub(crate) requires_grad: bool,
}

/// Reverse-mode tape over a restricted differentiable op set.
#[derive(Debug, Default)]
pub struct Graph<S: Scalar> {
    pub(crate) nodes: Vec<Node<S>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn numel(&self, id: NodeId) -> usize {
        self.nodes[id.0].data.len()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<S> {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("node shape/data always consistent")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, id: NodeId) -> S {
        debug_assert_eq!(self.numel(id), 1);
        self.nodes[id.0].data[0]
    }

    pub(crate) fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    fn push(
        &mut self,
        op: Op<S>,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
        data: Vec<S>,
        op_name: &'static str,
    ) -> Result<NodeId> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if !data.iter().all(|x| x.is_finite()) {
            return Err(TensorError::Numeric { op: op_name });
        }
        let requires_grad = matches!(op, Op::Leaf) == false
            && inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, inputs, shape, data, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Differentiable or constant leaf holding externally supplied values.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<NodeId> {
        let (shape, data) = value.into_parts();
        if !data.iter().all(|x| x.is_finite()) {
            return Err(TensorError::Numeric { op: "leaf" });
        }
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], shape, data, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<NodeId> {
        self.leaf(value, false)
    }

    pub fn scalar_constant(&mut self, value: S) -> Result<NodeId> {
        self.leaf(Tensor::scalar(value), false)
    }

    /// Ids of all differentiable leaves, in creation order.
    pub fn grad_leaves(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.requires_grad)
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    // ---- elementwise ----------------------------------------------------

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        let data =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        self.push(Op::Add, vec![a, b], self.nodes[a.0].shape.clone(), data, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("sub", a, b)?;
        let data =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        self.push(Op::Sub, vec![a, b], self.nodes[a.0].shape.clone(), data, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mul", a, b)?;
        let data =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        self.push(Op::Mul, vec![a, b], self.nodes[a.0].shape.clone(), data, "mul")
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.data(a).iter().map(|&x| -x).collect();
        self.push(Op::Neg, vec![a], self.nodes[a.0].shape.clone(), data, "neg")
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> Result<NodeId> {
        let data = self.data(a).iter().map(|&x| x * c).collect();
        self.push(Op::Scale(c), vec![a], self.nodes[a.0].shape.clone(), data, "scale")
    }

    pub fn add_scalar(&mut self, a: NodeId, c: S) -> Result<NodeId> {
        let data = self.data(a).iter().map(|&x| x + c).collect();
        self.push(Op::AddScalar(c), vec![a], self.nodes[a.0].shape.clone(), data, "add_scalar")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.data(a).iter().map(|&x| x.exp()).collect();
        self.push(Op::Exp, vec![a], self.nodes[a.0].shape.clone(), data, "exp")
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.data(a).iter().map(|&x| x.ln()).collect();
        self.push(Op::Ln, vec![a], self.nodes[a.0].shape.clone(), data, "ln")
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.data(a).iter().map(|&x| S::one() / x).collect();
        self.push(Op::Recip, vec![a], self.nodes[a.0].shape.clone(), data, "recip")
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.data(a).iter().map(|&x| x.sqrt()).collect();
        self.push(Op::Sqrt, vec![a], self.nodes[a.0].shape.clone(), data, "sqrt")
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.data(a).iter().map(|&x| x.abs()).collect();
        self.push(Op::Abs, vec![a], self.nodes[a.0].shape.clone(), data, "abs")
    }

    pub fn powf(&mut self, a: NodeId, e: S) -> Result<NodeId> {
        let data = self.data(a).iter().map(|&x| x.powf(e)).collect();
        self.push(Op::Powf(e), vec![a], self.nodes[a.0].shape.clone(), data, "powf")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self
            .data(a)
            .iter()
            .map(|&x| if x > S::zero() { x } else { S::zero() })
            .collect();
        self.push(Op::Relu, vec![a], self.nodes[a.0].shape.clone(), data, "relu")
    }

    pub fn mul_const(&mut self, a: NodeId, mask: Arc<Vec<S>>) -> Result<NodeId> {
        if mask.len() != self.numel(a) {
            return Err(TensorError::shape(
                "mul_const",
                format!("mask len {} vs {}", mask.len(), self.numel(a)),
            ));
        }
        let data = self.data(a).iter().zip(mask.iter()).map(|(&x, &m)| x * m).collect();
        self.push(Op::MulConst(mask), vec![a], self.nodes[a.0].shape.clone(), data, "mul_const")
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_acc(self.data(a), self.data(b), m, k, n, &mut out);
        self.push(Op::Matmul, vec![a, b], vec![m, n], out, "matmul")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(TensorError::shape("transpose", format!("{:?}", sa)));
        }
        let (r, c) = (sa[0], sa[1]);
        let out = kernels::transpose(self.data(a), r, c);
        self.push(Op::Transpose, vec![a], vec![c, r], out, "transpose")
    }

    // ---- convolution -----------------------------------------------------

    fn conv_geom(
        &self,
        x: NodeId,
        xk_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<ConvGeom> {
        let sx = self.shape(x);
        if sx.len() != 4 || xk_shape.len() != 4 {
            return Err(TensorError::shape(
                "conv2d",
                format!("input {:?}, kernel {:?}", sx, xk_shape),
            ));
        }
        if sx[1] != xk_shape[1] {
            return Err(TensorError::shape(
                "conv2d",
                format!("in-channels {} vs kernel {}", sx[1], xk_shape[1]),
            ));
        }
        let (kh, kw) = (xk_shape[2], xk_shape[3]);
        let out_h = ConvGeom::out_dim(sx[2], kh, stride, pad).ok_or_else(|| {
            TensorError::shape("conv2d", format!("kernel {}x{} over {}x{} stride {}", kh, kw, sx[2], sx[3], stride))
        })?;
        let out_w = ConvGeom::out_dim(sx[3], kw, stride, pad).ok_or_else(|| {
            TensorError::shape("conv2d", format!("kernel {}x{} over {}x{} stride {}", kh, kw, sx[2], sx[3], stride))
        })?;
        Ok(ConvGeom {
            n: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: xk_shape[0],
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, padding: Padding) -> Result<NodeId> {
        let pad = padding.resolve(self.shape(k)[2].max(1));
        self.conv2d_explicit(x, k, stride, pad)
    }

    pub fn conv2d_explicit(&mut self, x: NodeId, k: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let geom = self.conv_geom(x, &self.shape(k).to_vec(), stride, pad)?;
        let out = kernels::conv2d(self.data(x), self.data(k), &geom);
        let shape = vec![geom.n, geom.c_out, geom.out_h, geom.out_w];
        self.push(Op::Conv2d(geom), vec![x, k], shape, out, "conv2d")
    }

    pub(crate) fn conv_input_grad(&mut self, gy: NodeId, k: NodeId, geom: ConvGeom) -> Result<NodeId> {
        let out = kernels::conv2d_input_grad(self.data(gy), self.data(k), &geom);
        let shape = vec![geom.n, geom.c_in, geom.h, geom.w];
        self.push(Op::ConvInputGrad(geom), vec![gy, k], shape, out, "conv_input_grad")
    }

    pub(crate) fn conv_kernel_grad(&mut self, x: NodeId, gy: NodeId, geom: ConvGeom) -> Result<NodeId> {
        let out = kernels::conv2d_kernel_grad(self.data(x), self.data(gy), &geom);
        let shape = vec![geom.c_out, geom.c_in, geom.kh, geom.kw];
        self.push(Op::ConvKernelGrad(geom), vec![x, gy], shape, out, "conv_kernel_grad")
    }

    // ---- gather / scatter -------------------------------------------------

    pub fn gather(&mut self, x: NodeId, idx: Arc<Vec<u32>>, out_shape: Vec<usize>) -> Result<NodeId> {
        let n = self.numel(x);
        if idx.iter().any(|&i| i as usize >= n) {
            return Err(TensorError::shape("gather", format!("index out of range for {} elements", n)));
        }
        if out_shape.iter().product::<usize>() != idx.len() {
            return Err(TensorError::shape("gather", "out shape/index length mismatch".to_string()));
        }
        let xd = self.data(x);
        let data = idx.iter().map(|&i| xd[i as usize]).collect();
        self.push(Op::Gather(idx), vec![x], out_shape, data, "gather")
    }

    pub fn scatter_add(&mut self, x: NodeId, idx: Arc<Vec<u32>>, out_shape: Vec<usize>) -> Result<NodeId> {
        if idx.len() != self.numel(x) {
            return Err(TensorError::shape("scatter_add", "index/input length mismatch".to_string()));
        }
        let out_len: usize = out_shape.iter().product();
        if idx.iter().any(|&i| i as usize >= out_len) {
            return Err(TensorError::shape("scatter_add", "index out of range".to_string()));
        }
        let mut data = vec![S::zero(); out_len];
        for (&i, &v) in idx.iter().zip(self.data(x)) {
            data[i as usize] = data[i as usize] + v;
        }
        self.push(Op::ScatterAdd(idx), vec![x], out_shape, data, "scatter_add")
    }

    /// Select rows of a tensor along its first axis.
    pub fn row_gather(&mut self, x: NodeId, rows: Arc<Vec<u32>>) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.is_empty() {
            return Err(TensorError::shape("row_gather", "scalar input".to_string()));
        }
        let n_rows = sx[0];
        if rows.iter().any(|&r| r as usize >= n_rows) {
            return Err(TensorError::shape("row_gather", format!("row out of range for {}", n_rows)));
        }
        let row_len: usize = sx[1..].iter().product();
        let mut shape = sx.to_vec();
        shape[0] = rows.len();
        let xd = self.data(x);
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows.iter() {
            data.extend_from_slice(&xd[r as usize * row_len..(r as usize + 1) * row_len]);
        }
        self.push(Op::RowGather(rows), vec![x], shape, data, "row_gather")
    }

    pub fn row_scatter_add(&mut self, x: NodeId, rows: Arc<Vec<u32>>, out_rows: usize) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.is_empty() || sx[0] != rows.len() {
            return Err(TensorError::shape("row_scatter_add", "row count mismatch".to_string()));
        }
        let row_len: usize = sx[1..].iter().product();
        let mut shape = sx.to_vec();
        shape[0] = out_rows;
        let mut data = vec![S::zero(); out_rows * row_len];
        let xd = self.data(x);
        for (i, &r) in rows.iter().enumerate() {
            let dst = r as usize * row_len;
            for j in 0..row_len {
                data[dst + j] = data[dst + j] + xd[i * row_len + j];
            }
        }
        self.push(Op::RowScatterAdd(rows), vec![x], shape, data, "row_scatter_add")
    }

    // ---- reductions / broadcasts ------------------------------------------

    /// [R, C] -> [R], summing over the last axis.
    pub fn sum_last(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(TensorError::shape("sum_last", format!("{:?}", sx)));
        }
        let (r, c) = (sx[0], sx[1]);
        let xd = self.data(x);
        let mut data = vec![S::zero(); r];
        for i in 0..r {
            let mut acc = S::zero();
            for j in 0..c {
                acc = acc + xd[i * c + j];
            }
            data[i] = acc;
        }
        self.push(Op::SumLast { cols: c }, vec![x], vec![r], data, "sum_last")
    }

    /// [R] -> [R, C], repeating each entry along a new last axis.
    pub fn broadcast_last(&mut self, x: NodeId, cols: usize) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() != 1 {
            return Err(TensorError::shape("broadcast_last", format!("{:?}", sx)));
        }
        let r = sx[0];
        let xd = self.data(x);
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            data.extend(std::iter::repeat(xd[i]).take(cols));
        }
        self.push(Op::BroadcastLast { cols }, vec![x], vec![r, cols], data, "broadcast_last")
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let mut acc = S::zero();
        for &v in self.data(x) {
            acc = acc + v;
        }
        self.push(Op::SumAll, vec![x], vec![], vec![acc], "sum_all")
    }

    /// scalar -> given shape.
    pub fn broadcast_all(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if self.numel(x) != 1 {
            return Err(TensorError::shape("broadcast_all", "input not scalar".to_string()));
        }
        let v = self.data(x)[0];
        let n: usize = shape.iter().product();
        self.push(Op::BroadcastAll, vec![x], shape, vec![v; n], "broadcast_all")
    }

    /// [N,C,H,W] -> [C], summing over batch and spatial axes.
    pub fn channel_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() != 4 {
            return Err(TensorError::shape("channel_sum", format!("{:?}", sx)));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let xd = self.data(x);
        let mut data = vec![S::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let mut acc = S::zero();
                for p in 0..hw {
                    acc = acc + xd[base + p];
                }
                data[ch] = data[ch] + acc;
            }
        }
        self.push(Op::ChannelSum, vec![x], vec![c], data, "channel_sum")
    }

    /// [C] -> [N,C,H,W].
    pub fn channel_broadcast(&mut self, x: NodeId, n: usize, h: usize, w: usize) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() != 1 {
            return Err(TensorError::shape("channel_broadcast", format!("{:?}", sx)));
        }
        let c = sx[0];
        let xd = self.data(x);
        let hw = h * w;
        let mut data = Vec::with_capacity(n * c * hw);
        for _ in 0..n {
            for ch in 0..c {
                data.extend(std::iter::repeat(xd[ch]).take(hw));
            }
        }
        self.push(Op::ChannelBroadcast, vec![x], vec![n, c, h, w], data, "channel_broadcast")
    }

    /// [N,K] -> [K], summing over rows.
    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(TensorError::shape("sum_rows", format!("{:?}", sx)));
        }
        let (n, k) = (sx[0], sx[1]);
        let xd = self.data(x);
        let mut data = vec![S::zero(); k];
        for i in 0..n {
            for j in 0..k {
                data[j] = data[j] + xd[i * k + j];
            }
        }
        self.push(Op::SumRows, vec![x], vec![k], data, "sum_rows")
    }

    /// [K] -> [N,K], repeating the row.
    pub fn broadcast_rows(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() != 1 {
            return Err(TensorError::shape("broadcast_rows", format!("{:?}", sx)));
        }
        let k = sx[0];
        let xd = self.data(x);
        let mut data = Vec::with_capacity(n * k);
        for _ in 0..n {
            data.extend_from_slice(xd);
        }
        self.push(Op::BroadcastRows, vec![x], vec![n, k], data, "broadcast_rows")
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.numel(x) {
            return Err(TensorError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(x), shape),
            ));
        }
        let data = self.data(x).to_vec();
        self.push(Op::Reshape, vec![x], shape, data, "reshape")
    }

    // ---- replay ------------------------------------------------------------

    /// Recompute every non-leaf node from current leaf values, in tape order.
    /// With unchanged leaves this must reproduce the recorded values bit-identically.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let inputs = self.nodes[i].inputs.clone();
            let out_shape = self.nodes[i].shape.clone();
            let out_len = self.nodes[i].data.len();
            let get = |g: &Graph<S>, j: usize| g.nodes[inputs[j].0].data.clone();
            let data: Vec<S> = match &op {
                Op::Leaf => unreachable!(),
                Op::Add => {
                    let (a, b) = (get(self, 0), get(self, 1));
                    a.iter().zip(&b).map(|(&x, &y)| x + y).collect()
                }
                Op::Sub => {
                    let (a, b) = (get(self, 0), get(self, 1));
                    a.iter().zip(&b).map(|(&x, &y)| x - y).collect()
                }
                Op::Mul => {
                    let (a, b) = (get(self, 0), get(self, 1));
                    a.iter().zip(&b).map(|(&x, &y)| x * y).collect()
                }
                Op::Neg => get(self, 0).iter().map(|&x| -x).collect(),
                Op::Scale(c) => get(self, 0).iter().map(|&x| x * *c).collect(),
                Op::AddScalar(c) => get(self, 0).iter().map(|&x| x + *c).collect(),
                Op::Exp => get(self, 0).iter().map(|&x| x.exp()).collect(),
                Op::Ln => get(self, 0).iter().map(|&x| x.ln()).collect(),
                Op::Recip => get(self, 0).iter().map(|&x| S::one() / x).collect(),
                Op::Sqrt => get(self, 0).iter().map(|&x| x.sqrt()).collect(),
                Op::Abs => get(self, 0).iter().map(|&x| x.abs()).collect(),
                Op::Powf(e) => get(self, 0).iter().map(|&x| x.powf(*e)).collect(),
                Op::Relu => get(self, 0)
                    .iter()
                    .map(|&x| if x > S::zero() { x } else { S::zero() })
                    .collect(),
                Op::MulConst(mask) => {
                    get(self, 0).iter().zip(mask.iter()).map(|(&x, &m)| x * m).collect()
                }
                Op::Matmul => {
                    let (a, b) = (get(self, 0), get(self, 1));
                    let sa = self.nodes[inputs[0].0].shape.clone();
                    let sb = self.nodes[inputs[1].0].shape.clone();
                    let mut out = vec![S::zero(); sa[0] * sb[1]];
                    kernels::matmul_acc(&a, &b, sa[0], sa[1], sb[1], &mut out);
                    out
                }
                Op::Transpose => {
                    let sa = self.nodes[inputs[0].0].shape.clone();
                    kernels::transpose(&get(self, 0), sa[0], sa[1])
                }
                Op::Conv2d(geom) => kernels::conv2d(&get(self, 0), &get(self, 1), geom),
                Op::ConvInputGrad(geom) => {
                    kernels::conv2d_input_grad(&get(self, 0), &get(self, 1), geom)
                }
                Op::ConvKernelGrad(geom) => {
                    kernels::conv2d_kernel_grad(&get(self, 0), &get(self, 1), geom)
                }
                Op::Gather(idx) => {
                    let x = get(self, 0);
                    idx.iter().map(|&j| x[j as usize]).collect()
                }
                Op::ScatterAdd(idx) => {
                    let x = get(self, 0);
                    let mut out = vec![S::zero(); out_len];
                    for (&j, &v) in idx.iter().zip(&x) {
                        out[j as usize] = out[j as usize] + v;
                    }
                    out
                }
                Op::RowGather(rows) => {
                    let x = get(self, 0);
                    let row_len: usize =
                        self.nodes[inputs[0].0].shape[1..].iter().product();
                    let mut out = Vec::with_capacity(rows.len() * row_len);
                    for &r in rows.iter() {
                        out.extend_from_slice(
                            &x[r as usize * row_len..(r as usize + 1) * row_len],
                        );
                    }
                    out
                }
                Op::RowScatterAdd(rows) => {
                    let x = get(self, 0);
                    let row_len: usize =
                        self.nodes[inputs[0].0].shape[1..].iter().product();
                    let mut out = vec![S::zero(); out_len];
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = r as usize * row_len;
                        for j in 0..row_len {
                            out[dst + j] = out[dst + j] + x[i * row_len + j];
                        }
                    }
                    out
                }
                Op::SumLast { cols } => {
                    let x = get(self, 0);
                    let r = x.len() / cols;
                    (0..r)
                        .map(|i| {
                            let mut acc = S::zero();
                            for j in 0..*cols {
                                acc = acc + x[i * cols + j];
                            }
                            acc
                        })
                        .collect()
                }
                Op::BroadcastLast { cols } => {
                    let x = get(self, 0);
                    let mut out = Vec::with_capacity(x.len() * cols);
                    for &v in &x {
                        out.extend(std::iter::repeat(v).take(*cols));
                    }
                    out
                }
                Op::SumAll => {
                    let x = get(self, 0);
                    let mut acc = S::zero();
                    for &v in &x {
                        acc = acc + v;
                    }
                    vec![acc]
                }
                Op::BroadcastAll => {
                    let x = get(self, 0);
                    vec![x[0]; out_len]
                }
                Op::ChannelSum => {
                    let x = get(self, 0);
                    let sx = self.nodes[inputs[0].0].shape.clone();
                    let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                    let mut out = vec![S::zero(); c];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let mut acc = S::zero();
                            for p in 0..hw {
                                acc = acc + x[base + p];
                            }
                            out[ch] = out[ch] + acc;
                        }
                    }
                    out
                }
                Op::ChannelBroadcast => {
                    let x = get(self, 0);
                    let sh = out_shape.clone();
                    let (n, c, hw) = (sh[0], sh[1], sh[2] * sh[3]);
                    let mut out = Vec::with_capacity(n * c * hw);
                    for _ in 0..n {
                        for ch in 0..c {
                            out.extend(std::iter::repeat(x[ch]).take(hw));
                        }
                    }
                    out
                }
                Op::SumRows => {
                    let x = get(self, 0);
                    let sx = self.nodes[inputs[0].0].shape.clone();
                    let (n, k) = (sx[0], sx[1]);
                    let mut out = vec![S::zero(); k];
                    for i in 0..n {
                        for j in 0..k {
                            out[j] = out[j] + x[i * k + j];
                        }
                    }
                    out
                }
                Op::BroadcastRows => {
                    let x = get(self, 0);
                    let n = out_shape[0];
                    let mut out = Vec::with_capacity(n * x.len());
                    for _ in 0..n {
                        out.extend_from_slice(&x);
                    }
                    out
                }
                Op::Reshape => get(self, 0),
            };
            if !data.iter().all(|x| x.is_finite()) {
                return Err(TensorError::Numeric { op: "replay" });
            }
            self.nodes[i].data = data;
        }
        Ok(())
    }
}
