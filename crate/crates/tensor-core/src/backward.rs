//! Reverse pass. Adjoints are built out of the same op set they differentiate,
//! so a gradient is just another tape node and can itself be differentiated.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, NodeId, Op};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<S: Scalar> Graph<S> {
    /// Gradient of a scalar `root` with respect to every differentiable leaf.
    pub fn backward(&mut self, root: NodeId) -> Result<HashMap<NodeId, NodeId>> {
        let leaves = self.grad_leaves();
        let grads = self.backward_wrt(root, &leaves)?;
        Ok(leaves.into_iter().zip(grads).collect())
    }

    /// Gradient of a scalar `root` with respect to the given nodes (leaves or
    /// interior). Targets unreachable from `root` get a zeros node.
    pub fn backward_wrt(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if self.numel(root) != 1 {
            return Err(TensorError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut adjoint: Vec<Option<NodeId>> = vec![None; root.index() + 1];
        let seed = self.constant(Tensor::filled(self.shape(root).to_vec(), S::one()))?;
        adjoint[root.index()] = Some(seed);

        for id in (0..=root.index()).rev() {
            let g = match adjoint[id] {
                Some(g) => g,
                None => continue,
            };
            if self.inputs(NodeId(id)).is_empty() {
                continue;
            }
            let contributions = self.vjp(NodeId(id), g)?;
            for (input, contrib) in contributions {
                if !self.requires_grad(input) {
                    continue;
                }
                let slot = &mut adjoint[input.index()];
                match *slot {
                    None => *slot = Some(contrib),
                    Some(prev) => {
                        let merged = self.add(prev, contrib)?;
                        adjoint[input.index()] = Some(merged);
                    }
                }
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &target in wrt {
            match adjoint.get(target.index()).copied().flatten() {
                Some(g) => out.push(g),
                None => {
                    let zeros = self.constant(Tensor::zeros(self.shape(target).to_vec()))?;
                    out.push(zeros);
                }
            }
        }
        Ok(out)
    }

    /// Vector-Jacobian product of one node: adjoint contributions per input.
    /// Inputs that do not require grad get no contribution (their gradient
    /// nodes would be dropped by the caller anyway).
    fn vjp(&mut self, id: NodeId, g: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        let op = self.nodes[id.index()].op.clone();
        let inputs = self.nodes[id.index()].inputs.clone();
        let need =
            |s: &Self, j: usize| s.requires_grad(inputs[j]);
        let pairs: Vec<(NodeId, NodeId)> = match op {
            Op::Leaf => vec![],
            Op::Add => {
                let mut v = Vec::new();
                if need(self, 0) {
                    v.push((inputs[0], g));
                }
                if need(self, 1) {
                    v.push((inputs[1], g));
                }
                v
            }
            Op::Sub => {
                let mut v = Vec::new();
                if need(self, 0) {
                    v.push((inputs[0], g));
                }
                if need(self, 1) {
                    let ng = self.neg(g)?;
                    v.push((inputs[1], ng));
                }
                v
            }
            Op::Mul => {
                let mut v = Vec::new();
                if need(self, 0) {
                    let da = self.mul(g, inputs[1])?;
                    v.push((inputs[0], da));
                }
                if need(self, 1) {
                    let db = self.mul(g, inputs[0])?;
                    v.push((inputs[1], db));
                }
                v
            }
            Op::Neg => {
                let d = self.neg(g)?;
                vec![(inputs[0], d)]
            }
            Op::Scale(c) => {
                let d = self.scale(g, c)?;
                vec![(inputs[0], d)]
            }
            Op::AddScalar(_) => vec![(inputs[0], g)],
            Op::Exp => {
                // y = exp(x), dy/dx = y
                let d = self.mul(g, id)?;
                vec![(inputs[0], d)]
            }
            Op::Ln => {
                let r = self.recip(inputs[0])?;
                let d = self.mul(g, r)?;
                vec![(inputs[0], d)]
            }
            Op::Recip => {
                // y = 1/x, dy/dx = -y^2
                let y2 = self.mul(id, id)?;
                let gy2 = self.mul(g, y2)?;
                let d = self.neg(gy2)?;
                vec![(inputs[0], d)]
            }
            Op::Sqrt => {
                // y = sqrt(x), dy/dx = 1/(2y)
                let r = self.recip(id)?;
                let gr = self.mul(g, r)?;
                let d = self.scale(gr, S::from_f64(0.5))?;
                vec![(inputs[0], d)]
            }
            Op::Abs => {
                let sign: Vec<S> = self
                    .data(inputs[0])
                    .iter()
                    .map(|&x| {
                        if x > S::zero() {
                            S::one()
                        } else if x < S::zero() {
                            -S::one()
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                let d = self.mul_const(g, Arc::new(sign))?;
                vec![(inputs[0], d)]
            }
            Op::Powf(e) => {
                // y = x^e, dy/dx = e * x^(e-1)
                let xm1 = self.powf(inputs[0], e - S::one())?;
                let gx = self.mul(g, xm1)?;
                let d = self.scale(gx, e)?;
                vec![(inputs[0], d)]
            }
            Op::Relu => {
                let mask: Vec<S> = self
                    .data(inputs[0])
                    .iter()
                    .map(|&x| if x > S::zero() { S::one() } else { S::zero() })
                    .collect();
                let d = self.mul_const(g, Arc::new(mask))?;
                vec![(inputs[0], d)]
            }
            Op::MulConst(mask) => {
                let d = self.mul_const(g, mask)?;
                vec![(inputs[0], d)]
            }
            Op::Matmul => {
                // c = a @ b: da = g @ b^T, db = a^T @ g
                let mut v = Vec::new();
                if need(self, 0) {
                    let bt = self.transpose(inputs[1])?;
                    let da = self.matmul(g, bt)?;
                    v.push((inputs[0], da));
                }
                if need(self, 1) {
                    let at = self.transpose(inputs[0])?;
                    let db = self.matmul(at, g)?;
                    v.push((inputs[1], db));
                }
                v
            }
            Op::Transpose => {
                let d = self.transpose(g)?;
                vec![(inputs[0], d)]
            }
            Op::Conv2d(geom) => {
                let mut v = Vec::new();
                if need(self, 0) {
                    let dx = self.conv_input_grad(g, inputs[1], geom)?;
                    v.push((inputs[0], dx));
                }
                if need(self, 1) {
                    let dk = self.conv_kernel_grad(inputs[0], g, geom)?;
                    v.push((inputs[1], dk));
                }
                v
            }
            Op::ConvInputGrad(geom) => {
                // y = A(gy, k) is the adjoint of conv2d in x; its own adjoints
                // follow from <conv2d(h,k), gy> = <h, A(gy,k)>:
                let mut v = Vec::new();
                if need(self, 0) {
                    let d_gy = self.conv2d_explicit(g, inputs[1], geom.stride, geom.pad)?;
                    v.push((inputs[0], d_gy));
                }
                if need(self, 1) {
                    let d_k = self.conv_kernel_grad(g, inputs[0], geom)?;
                    v.push((inputs[1], d_k));
                }
                v
            }
            Op::ConvKernelGrad(geom) => {
                // y = B(x, gy), adjoint of conv2d in k.
                let mut v = Vec::new();
                if need(self, 0) {
                    let d_x = self.conv_input_grad(inputs[1], g, geom)?;
                    v.push((inputs[0], d_x));
                }
                if need(self, 1) {
                    let d_gy = self.conv2d_explicit(inputs[0], g, geom.stride, geom.pad)?;
                    v.push((inputs[1], d_gy));
                }
                v
            }
            Op::Gather(idx) => {
                let shape = self.shape(inputs[0]).to_vec();
                let d = self.scatter_add(g, idx, shape)?;
                vec![(inputs[0], d)]
            }
            Op::ScatterAdd(idx) => {
                let shape = self.shape(inputs[0]).to_vec();
                let d = self.gather(g, idx, shape)?;
                vec![(inputs[0], d)]
            }
            Op::RowGather(rows) => {
                let n_rows = self.shape(inputs[0])[0];
                let d = self.row_scatter_add(g, rows, n_rows)?;
                vec![(inputs[0], d)]
            }
            Op::RowScatterAdd(rows) => {
                let d = self.row_gather(g, rows)?;
                vec![(inputs[0], d)]
            }
            Op::SumLast { cols } => {
                let d = self.broadcast_last(g, cols)?;
                vec![(inputs[0], d)]
            }
            Op::BroadcastLast { .. } => {
                let d = self.sum_last(g)?;
                vec![(inputs[0], d)]
            }
            Op::SumAll => {
                let shape = self.shape(inputs[0]).to_vec();
                let d = self.broadcast_all(g, shape)?;
                vec![(inputs[0], d)]
            }
            Op::BroadcastAll => {
                let d = self.sum_all(g)?;
                vec![(inputs[0], d)]
            }
            Op::ChannelSum => {
                let s = self.shape(inputs[0]).to_vec();
                let d = self.channel_broadcast(g, s[0], s[2], s[3])?;
                vec![(inputs[0], d)]
            }
            Op::ChannelBroadcast => {
                let d = self.channel_sum(g)?;
                vec![(inputs[0], d)]
            }
            Op::SumRows => {
                let n = self.shape(inputs[0])[0];
                let d = self.broadcast_rows(g, n)?;
                vec![(inputs[0], d)]
            }
            Op::BroadcastRows => {
                let d = self.sum_rows(g)?;
                vec![(inputs[0], d)]
            }
            Op::Reshape => {
                let shape = self.shape(inputs[0]).to_vec();
                let d = self.reshape(g, shape)?;
                vec![(inputs[0], d)]
            }
        };
        Ok(pairs)
    }
}
