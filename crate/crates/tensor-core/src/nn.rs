//! Layer-level operations composed from tape primitives. Because they are
//! compositions, their first and second derivatives come from the tape for
//! free and stay exact.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;

impl<S: Scalar> Graph<S> {
    /// Mean over the batch of -log softmax(logits)[label].
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(TensorError::shape(
                "softmax_cross_entropy",
                format!("logits {:?} vs {} labels", shape, labels.len()),
            ));
        }
        let (n, k) = (shape[0], shape[1]);
        for &l in labels {
            if l >= k {
                return Err(TensorError::Label { label: l, classes: k });
            }
        }
        // Row maxima are subtracted as constants; the identity
        // lse(x) = m + ln(sum exp(x - m)) holds for any constant m.
        let data = self.data(logits);
        let mut row_max = vec![S::zero(); n];
        for i in 0..n {
            let mut m = data[i * k];
            for j in 1..k {
                let v = data[i * k + j];
                if v > m {
                    m = v;
                }
            }
            row_max[i] = m;
        }
        let mut onehot = vec![S::zero(); n * k];
        for (i, &l) in labels.iter().enumerate() {
            onehot[i * k + l] = S::one();
        }

        let m_const = self.constant(crate::Tensor::from_vec(row_max))?;
        let m_wide = self.broadcast_last(m_const, k)?;
        let centered = self.sub(logits, m_wide)?;
        let e = self.exp(centered)?;
        let row_sum = self.sum_last(e)?;
        let row_lse = self.ln(row_sum)?;
        let lse_total = self.sum_all(row_lse)?;
        let max_total = self.sum_all(m_const)?;
        let lse = self.add(lse_total, max_total)?;
        let picked_wide = self.mul_const(logits, Arc::new(onehot))?;
        let picked = self.sum_all(picked_wide)?;
        let diff = self.sub(lse, picked)?;
        self.scale(diff, S::from_f64(1.0 / n as f64))
    }

    /// 2x2-style max pooling with square kernel and stride, no padding.
    /// Ties go to the first element in row-major window order.
    pub fn max_pool2d(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::shape("max_pool2d", format!("{:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if kernel > h || kernel > w || stride == 0 {
            return Err(TensorError::shape(
                "max_pool2d",
                format!("kernel {} stride {} over {}x{}", kernel, stride, h, w),
            ));
        }
        let out_h = (h - kernel) / stride + 1;
        let out_w = (w - kernel) / stride + 1;
        let data = self.data(x);
        let mut idx = Vec::with_capacity(n * c * out_h * out_w);
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut best = base + oy * stride * w + ox * stride;
                        let mut best_v = data[best];
                        for dy in 0..kernel {
                            for dx in 0..kernel {
                                let i = base + (oy * stride + dy) * w + (ox * stride + dx);
                                if data[i] > best_v {
                                    best_v = data[i];
                                    best = i;
                                }
                            }
                        }
                        idx.push(best as u32);
                    }
                }
            }
        }
        self.gather(x, Arc::new(idx), vec![n, c, out_h, out_w])
    }

    /// [N,C,H,W] -> [N,C], max over all spatial positions, first index wins ties.
    pub fn global_max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::shape("global_max_pool", format!("{:?}", s)));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let data = self.data(x);
        let mut idx = Vec::with_capacity(n * c);
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let mut best = base;
                let mut best_v = data[base];
                for p in 1..hw {
                    if data[base + p] > best_v {
                        best_v = data[base + p];
                        best = base + p;
                    }
                }
                idx.push(best as u32);
            }
        }
        self.gather(x, Arc::new(idx), vec![n, c])
    }

    /// x[N,Din] @ w[Din,Dout] + b[Dout].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let n = self.shape(x)[0];
        let y = self.matmul(x, w)?;
        let bias = self.broadcast_rows(b, n)?;
        self.add(y, bias)
    }

    /// Conv2d plus per-channel bias.
    pub fn conv2d_bias(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let y = self.conv2d_explicit(x, k, stride, pad)?;
        let s = self.shape(y).to_vec();
        let bias = self.channel_broadcast(b, s[0], s[2], s[3])?;
        self.add(y, bias)
    }

    /// Group normalization over [N,C,H,W] with per-batch statistics and
    /// per-channel affine parameters. No running state.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::shape("group_norm", format!("{:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::shape(
                "group_norm",
                format!("{} channels not divisible by {} groups", c, groups),
            ));
        }
        let group_size = (c / groups) * h * w;
        let rows = n * groups;
        let flat = self.reshape(x, vec![rows, group_size])?;
        let inv_size = S::from_f64(1.0 / group_size as f64);
        let sums = self.sum_last(flat)?;
        let mean = self.scale(sums, inv_size)?;
        let mean_wide = self.broadcast_last(mean, group_size)?;
        let centered = self.sub(flat, mean_wide)?;
        let sq = self.mul(centered, centered)?;
        let var_sums = self.sum_last(sq)?;
        let var = self.scale(var_sums, inv_size)?;
        let var_eps = self.add_scalar(var, S::from_f64(eps))?;
        let std = self.sqrt(var_eps)?;
        let inv_std = self.recip(std)?;
        let inv_wide = self.broadcast_last(inv_std, group_size)?;
        let normed = self.mul(centered, inv_wide)?;
        let back = self.reshape(normed, vec![n, c, h, w])?;
        let gamma_wide = self.channel_broadcast(gamma, n, h, w)?;
        let beta_wide = self.channel_broadcast(beta, n, h, w)?;
        let scaled = self.mul(back, gamma_wide)?;
        self.add(scaled, beta_wide)
    }
}
