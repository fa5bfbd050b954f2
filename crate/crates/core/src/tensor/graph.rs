//! The recording tape: forward operations and their reverse-mode rules.
//!
//! Every operation pushes one node holding the computed value and enough
//! saved state to run its backward rule. Nodes are addressed by [`Var`]
//! handles (plain indices), so values are freely copyable and the tape owns
//! all buffers. A tape is confined to one thread; independent tapes may run
//! in parallel.

// float math via the trait: test builds link std, the lib build must not
#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng as _;

use super::Tensor;
use crate::error::{CoreError, Result};
use crate::Rng;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Forward execution mode. Affects dropout (identity in eval) and batch
/// normalization (running statistics in eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update produced by a train-mode batch norm.
/// The keys are parameter-store indices supplied by the caller; the graph
/// only transports them.
#[derive(Debug, Clone)]
pub struct BatchStatUpdate {
    pub mean_key: usize,
    pub var_key: usize,
    pub new_mean: Vec<f64>,
    pub new_var: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    ScalarMul { a: usize, c: f64 },
    ScalarAdd { a: usize },
    /// `[rows, width] + [width]`, the one sanctioned broadcast besides scalars.
    AddBias { a: usize, bias: usize, width: usize },
    /// Scale row `r` of `[rows, width]` by `s[r]`.
    RowScale { a: usize, s: usize, width: usize },
    /// Repeat each row of `[rows, width]` `times` times consecutively.
    RepeatRows { a: usize, times: usize, width: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    /// Batched matmul over matching leading dimension.
    Bmm { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    TransposeLast2 { a: usize, batch: usize, rows: usize, cols: usize },
    Conv1dCausal {
        x: usize,
        w: usize,
        bias: usize,
        batch: usize,
        in_ch: usize,
        out_ch: usize,
        len: usize,
        kernel: usize,
        dilation: usize,
    },
    Relu { a: usize },
    Elu { a: usize, alpha: f64 },
    Sigmoid { a: usize },
    Tanh { a: usize },
    SoftmaxLast { a: usize, row: usize },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        width: usize,
        /// Saved per-row (mean, inv_std).
        stats: Vec<(f64, f64)>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        channels: usize,
        /// Per-channel statistics actually used by the forward pass.
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
        train_stats: bool,
    },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize, len: usize },
    Reshape { a: usize },
    Embedding { table: usize, ids: Vec<usize>, width: usize },
    Dropout { a: usize, mask: Vec<f64> },
    SumAll { a: usize },
    MeanAll { a: usize },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode autodiff tape.
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    bn_updates: Vec<BatchStatUpdate>,
}

// ---------------------------------------------------------------------------
// raw kernels
// ---------------------------------------------------------------------------

/// out[m,n] += A[m,k] @ B[k,n]
fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// out[m,rows] += A[m,inner] @ B^T where B is [rows, inner]
fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, inner: usize, rows: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * inner..(i + 1) * inner];
        let orow = &mut out[i * rows..(i + 1) * rows];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * inner..(j + 1) * inner];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o += acc;
        }
    }
}

/// out[k,n] += A^T @ B where A is [m,k], B is [m,n]
fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Running-statistics updates recorded by train-mode batch norms.
    pub fn take_batch_stat_updates(&mut self) -> Vec<BatchStatUpdate> {
        core::mem::take(&mut self.bn_updates)
    }

    /// Introduce a leaf value. Gradients are accumulated for it when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call w.r.t. `v`, if it was tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, requires, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // -----------------------------------------------------------------------
    // elementwise and scalar ops
    // -----------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(t, &[a, b], Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(t, &[a, b], Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(t, &[a, b], Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push_op(t, &[a], Op::ScalarMul { a: a.0, c })
    }

    pub fn scalar_add(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(a).iter().map(|x| x + c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push_op(t, &[a], Op::ScalarAdd { a: a.0 })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scalar_mul(a, -1.0)
    }

    /// `[rows, width] + [width]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let ashape = self.shape(a);
        let width = *ashape.last().ok_or_else(|| {
            CoreError::shape("add_bias", "input has no dimensions")
        })?;
        if self.shape(bias) != [width] {
            return Err(CoreError::shape(
                "add_bias",
                format!("input {:?} vs bias {:?}", ashape, self.shape(bias)),
            ));
        }
        let bdata = self.value(bias).data().to_vec();
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bdata[i % width])
            .collect();
        let t = Tensor::new(ashape.to_vec(), data)?;
        Ok(self.push_op(
            t,
            &[a, bias],
            Op::AddBias {
                a: a.0,
                bias: bias.0,
                width,
            },
        ))
    }

    /// Scale each row of `[rows, width]` by the matching entry of `s: [rows]`.
    pub fn row_scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let ashape = self.shape(a).to_vec();
        if ashape.len() != 2 {
            return Err(CoreError::shape(
                "row_scale",
                format!("expected rank-2 input, got {:?}", ashape),
            ));
        }
        let (rows, width) = (ashape[0], ashape[1]);
        if self.shape(s) != [rows] {
            return Err(CoreError::shape(
                "row_scale",
                format!("input {:?} vs scale {:?}", ashape, self.shape(s)),
            ));
        }
        let sdata = self.value(s).data().to_vec();
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * sdata[i / width])
            .collect();
        let t = Tensor::new(ashape, data)?;
        Ok(self.push_op(
            t,
            &[a, s],
            Op::RowScale {
                a: a.0,
                s: s.0,
                width,
            },
        ))
    }

    /// Repeat each row of `[rows, width]` `times` times consecutively,
    /// producing `[rows * times, width]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let ashape = self.shape(a).to_vec();
        if ashape.len() != 2 || times == 0 {
            return Err(CoreError::shape(
                "repeat_rows",
                format!("expected rank-2 input and times >= 1, got {:?} x{}", ashape, times),
            ));
        }
        let (rows, width) = (ashape[0], ashape[1]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * times * width);
        for r in 0..rows {
            let row = &src[r * width..(r + 1) * width];
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        let t = Tensor::new(vec![rows * times, width], data)?;
        Ok(self.push_op(
            t,
            &[a],
            Op::RepeatRows {
                a: a.0,
                times,
                width,
            },
        ))
    }

    // -----------------------------------------------------------------------
    // linear algebra
    // -----------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(CoreError::shape(
                "matmul",
                format!("{:?} x {:?}", ash, bsh),
            ));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(t, &[a, b], Op::MatMul { a: a.0, b: b.0, m, k, n }))
    }

    /// Batched matmul: `[batch, m, k] @ [batch, k, n] -> [batch, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(CoreError::shape("bmm", format!("{:?} x {:?}", ash, bsh)));
        }
        let (batch, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut out = vec![0.0; batch * m * n];
        for s in 0..batch {
            matmul_acc(
                &self.value(a).data()[s * m * k..(s + 1) * m * k],
                &self.value(b).data()[s * k * n..(s + 1) * k * n],
                m,
                k,
                n,
                &mut out[s * m * n..(s + 1) * m * n],
            );
        }
        let t = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push_op(
            t,
            &[a, b],
            Op::Bmm {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        if ash.len() < 2 {
            return Err(CoreError::shape(
                "transpose_last2",
                format!("need rank >= 2, got {:?}", ash),
            ));
        }
        let rows = ash[ash.len() - 2];
        let cols = ash[ash.len() - 1];
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for s in 0..batch {
            let base = s * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    data[base + c * rows + r] = src[base + r * cols + c];
                }
            }
        }
        let mut shape = ash.clone();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let t = Tensor::new(shape, data)?;
        Ok(self.push_op(
            t,
            &[a],
            Op::TransposeLast2 {
                a: a.0,
                batch,
                rows,
                cols,
            },
        ))
    }

    /// Dilated causal 1-D convolution. Input `[batch, in_ch, len]`, weight
    /// `[out_ch, in_ch, kernel]`, bias `[out_ch]`. Left zero-padding of
    /// `(kernel - 1) * dilation` keeps the output length equal to the input
    /// length, and output position `t` depends only on inputs at `<= t`.
    pub fn conv1d_causal(&mut self, x: Var, w: Var, bias: Var, dilation: usize) -> Result<Var> {
        let (xsh, wsh) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xsh.len() != 3 || wsh.len() != 3 || xsh[1] != wsh[1] {
            return Err(CoreError::shape(
                "conv1d_causal",
                format!("input {:?} vs weight {:?}", xsh, wsh),
            ));
        }
        if dilation == 0 {
            return Err(CoreError::InvalidArgument {
                what: "conv1d_causal dilation must be >= 1".into(),
            });
        }
        let (batch, in_ch, len) = (xsh[0], xsh[1], xsh[2]);
        let (out_ch, kernel) = (wsh[0], wsh[2]);
        if self.shape(bias) != [out_ch] {
            return Err(CoreError::shape(
                "conv1d_causal",
                format!("bias {:?} vs out_ch {}", self.shape(bias), out_ch),
            ));
        }
        let pad = (kernel - 1) * dilation;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; batch * out_ch * len];
        for b in 0..batch {
            for o in 0..out_ch {
                let orow = &mut out[(b * out_ch + o) * len..(b * out_ch + o + 1) * len];
                orow.iter_mut().for_each(|v| *v = bd[o]);
                for i in 0..in_ch {
                    let xrow = &xd[(b * in_ch + i) * len..(b * in_ch + i + 1) * len];
                    for j in 0..kernel {
                        let wv = wd[(o * in_ch + i) * kernel + j];
                        if wv == 0.0 {
                            continue;
                        }
                        // source index = t + j*dilation - pad; skip t below pad offset
                        let offset = pad - j * dilation;
                        for t in offset..len {
                            orow[t] += wv * xrow[t - offset];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![batch, out_ch, len], out)?;
        Ok(self.push_op(
            t,
            &[x, w, bias],
            Op::Conv1dCausal {
                x: x.0,
                w: w.0,
                bias: bias.0,
                batch,
                in_ch,
                out_ch,
                len,
                kernel,
                dilation,
            },
        ))
    }

    // -----------------------------------------------------------------------
    // activations
    // -----------------------------------------------------------------------

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push_op(t, &[a], Op::Relu { a: a.0 })
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let alpha = 1.0;
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { alpha * (x.exp() - 1.0) })
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push_op(t, &[a], Op::Elu { a: a.0, alpha })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push_op(t, &[a], Op::Sigmoid { a: a.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).iter().map(|&x| x.tanh()).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push_op(t, &[a], Op::Tanh { a: a.0 })
    }

    /// Softmax over the last axis. Rows whose entries sit below roughly
    /// -700 after max-subtraction underflow to exactly zero weight, which is
    /// what the causal attention mask relies on.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let row = *shape.last().ok_or_else(|| {
            CoreError::shape("softmax", "input has no dimensions")
        })?;
        if row == 0 {
            return Err(CoreError::shape("softmax", "empty softmax axis"));
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for (chunk, out) in src.chunks_exact(row).zip(data.chunks_exact_mut(row)) {
            let max = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (o, &x) in out.iter_mut().zip(chunk) {
                let e = (x - max).exp();
                *o = e;
                denom += e;
            }
            for o in out.iter_mut() {
                *o /= denom;
            }
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.push_op(t, &[a], Op::SoftmaxLast { a: a.0, row }))
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| {
            CoreError::shape("layer_norm", "input has no dimensions")
        })?;
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(CoreError::shape(
                "layer_norm",
                format!(
                    "input {:?} vs gamma {:?} / beta {:?}",
                    shape,
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut data = vec![0.0; src.len()];
        let mut stats = Vec::with_capacity(src.len() / width);
        for (chunk, out) in src.chunks_exact(width).zip(data.chunks_exact_mut(width)) {
            let mean = chunk.iter().sum::<f64>() / width as f64;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            stats.push((mean, inv_std));
            for (f, (o, &v)) in out.iter_mut().zip(chunk).enumerate() {
                *o = (v - mean) * inv_std * g[f] + b[f];
            }
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.push_op(
            t,
            &[x, gamma, beta],
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                width,
                stats,
            },
        ))
    }

    /// Batch normalization over the channel axis (axis 1) of a `[n, c]` or
    /// `[n, c, len]` input. In train mode, batch statistics are used and a
    /// running-statistics update is recorded under `stat_keys`; in eval mode
    /// the supplied running statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        stat_keys: (usize, usize),
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 && shape.len() != 3 {
            return Err(CoreError::shape(
                "batch_norm",
                format!("expected rank 2 or 3, got {:?}", shape),
            ));
        }
        let channels = shape[1];
        if self.shape(gamma) != [channels]
            || self.shape(beta) != [channels]
            || running_mean.len() != channels
            || running_var.len() != channels
        {
            return Err(CoreError::shape(
                "batch_norm",
                format!("input {:?} vs {} channel parameters", shape, channels),
            ));
        }
        let inner: usize = shape[2..].iter().product();
        let outer = shape[0];
        let per_channel = (outer * inner) as f64;
        let src = self.value(x).data().to_vec();
        let src = src.as_slice();

        let train_stats = self.mode == Mode::Train;
        let (mean, var): (Vec<f64>, Vec<f64>) = if train_stats {
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for n in 0..outer {
                for c in 0..channels {
                    let base = (n * channels + c) * inner;
                    for t in 0..inner {
                        mean[c] += src[base + t];
                    }
                }
            }
            mean.iter_mut().for_each(|m| *m /= per_channel);
            for n in 0..outer {
                for c in 0..channels {
                    let base = (n * channels + c) * inner;
                    for t in 0..inner {
                        let d = src[base + t] - mean[c];
                        var[c] += d * d;
                    }
                }
            }
            var.iter_mut().for_each(|v| *v /= per_channel);
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };

        if train_stats {
            let new_mean: Vec<f64> = running_mean
                .iter()
                .zip(&mean)
                .map(|(r, m)| (1.0 - momentum) * r + momentum * m)
                .collect();
            let new_var: Vec<f64> = running_var
                .iter()
                .zip(&var)
                .map(|(r, v)| (1.0 - momentum) * r + momentum * v)
                .collect();
            self.bn_updates.push(BatchStatUpdate {
                mean_key: stat_keys.0,
                var_key: stat_keys.1,
                new_mean,
                new_var,
            });
        }

        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut data = vec![0.0; src.len()];
        for n in 0..outer {
            for c in 0..channels {
                let inv_std = 1.0 / (var[c] + eps).sqrt();
                let base = (n * channels + c) * inner;
                for t in 0..inner {
                    data[base + t] = (src[base + t] - mean[c]) * inv_std * g[c] + b[c];
                }
            }
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.push_op(
            t,
            &[x, gamma, beta],
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                channels,
                mean,
                var,
                eps,
                train_stats,
            },
        ))
    }

    // -----------------------------------------------------------------------
    // shape ops
    // -----------------------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::InvalidArgument {
                what: "concat of zero tensors".into(),
            });
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(CoreError::shape(
                "concat",
                format!("axis {} out of range for {:?}", axis, first),
            ));
        }
        let mut axis_total = 0;
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != first.len()
                || sh
                    .iter()
                    .enumerate()
                    .any(|(d, &s)| d != axis && s != first[d])
            {
                return Err(CoreError::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {}", first, sh, axis),
                ));
            }
            axis_total += sh[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &p in parts {
            let psh = self.shape(p).to_vec();
            let plen = psh[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let src_base = o * plen * inner;
                let dst_base = (o * axis_total + offset) * inner;
                data[dst_base..dst_base + plen * inner]
                    .copy_from_slice(&src[src_base..src_base + plen * inner]);
            }
            offset += plen;
        }
        let t = Tensor::new(shape, data)?;
        let op = Op::Concat {
            parts: parts.iter().map(|v| v.0).collect(),
            axis,
        };
        Ok(self.push_op(t, parts, op))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(CoreError::shape(
                "slice",
                format!(
                    "range {}..{} on axis {} of {:?}",
                    start,
                    start + len,
                    axis,
                    shape
                ),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_base = (o * shape[axis] + start) * inner;
            let dst_base = o * len * inner;
            data[dst_base..dst_base + len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let mut new_shape = shape.clone();
        new_shape[axis] = len;
        let t = Tensor::new(new_shape, data)?;
        Ok(self.push_op(
            t,
            &[a],
            Op::Slice {
                a: a.0,
                axis,
                start,
                len,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(CoreError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(a), shape),
            ));
        }
        let t = Tensor::new(shape, self.value(a).data().to_vec())?;
        Ok(self.push_op(t, &[a], Op::Reshape { a: a.0 }))
    }

    /// Look up rows of `table: [vocab, width]` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tsh = self.shape(table).to_vec();
        if tsh.len() != 2 {
            return Err(CoreError::shape(
                "embedding",
                format!("table must be rank 2, got {:?}", tsh),
            ));
        }
        let (vocab, width) = (tsh[0], tsh[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(CoreError::InvalidArgument {
                what: format!("embedding id {} out of vocabulary {}", bad, vocab),
            });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let t = Tensor::new(vec![ids.len(), width], data)?;
        Ok(self.push_op(
            t,
            &[table],
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
                width,
            },
        ))
    }

    /// Inverted dropout. Identity (and unrecorded) in eval mode.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(CoreError::InvalidArgument {
                what: format!("dropout probability {} outside [0, 1)", p),
            });
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(t, &[a], Op::Dropout { a: a.0, mask }))
    }

    // -----------------------------------------------------------------------
    // reductions
    // -----------------------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        self.push_op(Tensor::scalar(s), &[a], Op::SumAll { a: a.0 })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).iter().sum();
        self.push_op(Tensor::scalar(s / n), &[a], Op::MeanAll { a: a.0 })
    }

    // -----------------------------------------------------------------------
    // backward
    // -----------------------------------------------------------------------

    fn grad_buf(&mut self, idx: usize) -> &mut Vec<f64> {
        let numel = self.nodes[idx].value.numel();
        self.nodes[idx].grad.get_or_insert_with(|| vec![0.0; numel])
    }

    fn wants_grad(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    /// Accumulate `d(loss)/d(leaf)` into every gradient-tracked node
    /// reachable from `loss`. Gradients add across uses of a value.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(CoreError::InvalidArgument {
                what: format!(
                    "backward requires a scalar loss, got shape {:?}",
                    self.shape(loss)
                ),
            });
        }
        if self.nodes.is_empty() {
            return Err(CoreError::InvalidArgument {
                what: "backward on an empty tape".into(),
            });
        }
        self.grad_buf(loss.0)[0] += 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.clone() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &grad, op);
        }
        Ok(())
    }

    fn propagate(&mut self, node: usize, g: &[f64], op: Op) {
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if self.wants_grad(a) {
                    for (d, &v) in self.grad_buf(a).iter_mut().zip(g) {
                        *d += v;
                    }
                }
                if self.wants_grad(b) {
                    for (d, &v) in self.grad_buf(b).iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.wants_grad(a) {
                    for (d, &v) in self.grad_buf(a).iter_mut().zip(g) {
                        *d += v;
                    }
                }
                if self.wants_grad(b) {
                    for (d, &v) in self.grad_buf(b).iter_mut().zip(g) {
                        *d -= v;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.wants_grad(a) {
                    let bd = self.nodes[b].value.data().to_vec();
                    for ((d, &v), &bv) in self.grad_buf(a).iter_mut().zip(g).zip(&bd) {
                        *d += v * bv;
                    }
                }
                if self.wants_grad(b) {
                    let ad = self.nodes[a].value.data().to_vec();
                    for ((d, &v), &av) in self.grad_buf(b).iter_mut().zip(g).zip(&ad) {
                        *d += v * av;
                    }
                }
            }
            Op::ScalarMul { a, c } => {
                if self.wants_grad(a) {
                    for (d, &v) in self.grad_buf(a).iter_mut().zip(g) {
                        *d += v * c;
                    }
                }
            }
            Op::ScalarAdd { a } => {
                if self.wants_grad(a) {
                    for (d, &v) in self.grad_buf(a).iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::AddBias { a, bias, width } => {
                if self.wants_grad(a) {
                    for (d, &v) in self.grad_buf(a).iter_mut().zip(g) {
                        *d += v;
                    }
                }
                if self.wants_grad(bias) {
                    let buf = self.grad_buf(bias);
                    for (i, &v) in g.iter().enumerate() {
                        buf[i % width] += v;
                    }
                }
            }
            Op::RowScale { a, s, width } => {
                if self.wants_grad(a) {
                    let sd = self.nodes[s].value.data().to_vec();
                    for (i, (d, &v)) in self.grad_buf(a).iter_mut().zip(g).enumerate() {
                        *d += v * sd[i / width];
                    }
                }
                if self.wants_grad(s) {
                    let ad = self.nodes[a].value.data().to_vec();
                    let buf = self.grad_buf(s);
                    for (i, &v) in g.iter().enumerate() {
                        buf[i / width] += v * ad[i];
                    }
                }
            }
            Op::RepeatRows { a, times, width } => {
                if self.wants_grad(a) {
                    let buf = self.grad_buf(a);
                    for (i, &v) in g.iter().enumerate() {
                        let out_row = i / width;
                        buf[(out_row / times) * width + i % width] += v;
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.wants_grad(a) {
                    let bd = self.nodes[b].value.data().to_vec();
                    matmul_a_bt(g, &bd, m, n, k, self.grad_buf(a));
                }
                if self.wants_grad(b) {
                    let ad = self.nodes[a].value.data().to_vec();
                    matmul_at_b(&ad, g, m, k, n, self.grad_buf(b));
                }
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                if self.wants_grad(a) {
                    let bd = self.nodes[b].value.data().to_vec();
                    let buf = self.grad_buf(a);
                    for s in 0..batch {
                        matmul_a_bt(
                            &g[s * m * n..(s + 1) * m * n],
                            &bd[s * k * n..(s + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut buf[s * m * k..(s + 1) * m * k],
                        );
                    }
                }
                if self.wants_grad(b) {
                    let ad = self.nodes[a].value.data().to_vec();
                    let buf = self.grad_buf(b);
                    for s in 0..batch {
                        matmul_at_b(
                            &ad[s * m * k..(s + 1) * m * k],
                            &g[s * m * n..(s + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut buf[s * k * n..(s + 1) * k * n],
                        );
                    }
                }
            }
            Op::TransposeLast2 {
                a,
                batch,
                rows,
                cols,
            } => {
                if self.wants_grad(a) {
                    let buf = self.grad_buf(a);
                    for s in 0..batch {
                        let base = s * rows * cols;
                        for r in 0..rows {
                            for c in 0..cols {
                                buf[base + r * cols + c] += g[base + c * rows + r];
                            }
                        }
                    }
                }
            }
            Op::Conv1dCausal {
                x,
                w,
                bias,
                batch,
                in_ch,
                out_ch,
                len,
                kernel,
                dilation,
            } => {
                let pad = (kernel - 1) * dilation;
                if self.wants_grad(w) {
                    let xd = self.nodes[x].value.data().to_vec();
                    let buf = self.grad_buf(w);
                    for b in 0..batch {
                        for o in 0..out_ch {
                            let grow = &g[(b * out_ch + o) * len..(b * out_ch + o + 1) * len];
                            for i in 0..in_ch {
                                let xrow = &xd[(b * in_ch + i) * len..(b * in_ch + i + 1) * len];
                                for j in 0..kernel {
                                    let offset = pad - j * dilation;
                                    let mut acc = 0.0;
                                    for t in offset..len {
                                        acc += grow[t] * xrow[t - offset];
                                    }
                                    buf[(o * in_ch + i) * kernel + j] += acc;
                                }
                            }
                        }
                    }
                }
                if self.wants_grad(bias) {
                    let buf = self.grad_buf(bias);
                    for b in 0..batch {
                        for o in 0..out_ch {
                            let grow = &g[(b * out_ch + o) * len..(b * out_ch + o + 1) * len];
                            buf[o] += grow.iter().sum::<f64>();
                        }
                    }
                }
                if self.wants_grad(x) {
                    let wd = self.nodes[w].value.data().to_vec();
                    let buf = self.grad_buf(x);
                    for b in 0..batch {
                        for o in 0..out_ch {
                            let grow = &g[(b * out_ch + o) * len..(b * out_ch + o + 1) * len];
                            for i in 0..in_ch {
                                let xbuf =
                                    &mut buf[(b * in_ch + i) * len..(b * in_ch + i + 1) * len];
                                for j in 0..kernel {
                                    let wv = wd[(o * in_ch + i) * kernel + j];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    let offset = pad - j * dilation;
                                    for t in offset..len {
                                        xbuf[t - offset] += grow[t] * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu { a } => {
                if self.wants_grad(a) {
                    let xd = self.nodes[a].value.data().to_vec();
                    for ((d, &v), &x) in self.grad_buf(a).iter_mut().zip(g).zip(&xd) {
                        if x > 0.0 {
                            *d += v;
                        }
                    }
                }
            }
            Op::Elu { a, alpha } => {
                if self.wants_grad(a) {
                    let xd = self.nodes[a].value.data().to_vec();
                    let yd = self.nodes[node].value.data().to_vec();
                    for (i, (d, &v)) in self.grad_buf(a).iter_mut().zip(g).enumerate() {
                        let slope = if xd[i] > 0.0 { 1.0 } else { yd[i] + alpha };
                        *d += v * slope;
                    }
                }
            }
            Op::Sigmoid { a } => {
                if self.wants_grad(a) {
                    let yd = self.nodes[node].value.data().to_vec();
                    for ((d, &v), &y) in self.grad_buf(a).iter_mut().zip(g).zip(&yd) {
                        *d += v * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh { a } => {
                if self.wants_grad(a) {
                    let yd = self.nodes[node].value.data().to_vec();
                    for ((d, &v), &y) in self.grad_buf(a).iter_mut().zip(g).zip(&yd) {
                        *d += v * (1.0 - y * y);
                    }
                }
            }
            Op::SoftmaxLast { a, row } => {
                if self.wants_grad(a) {
                    let yd = self.nodes[node].value.data().to_vec();
                    let buf = self.grad_buf(a);
                    for r in 0..yd.len() / row {
                        let ys = &yd[r * row..(r + 1) * row];
                        let gs = &g[r * row..(r + 1) * row];
                        let dot: f64 = ys.iter().zip(gs).map(|(y, gg)| y * gg).sum();
                        let bs = &mut buf[r * row..(r + 1) * row];
                        for ((d, &y), &gg) in bs.iter_mut().zip(ys).zip(gs) {
                            *d += y * (gg - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                width,
                stats,
            } => {
                let xd = self.nodes[x].value.data().to_vec();
                let gd = self.nodes[gamma].value.data().to_vec();
                let rows = xd.len() / width;
                if self.wants_grad(gamma) {
                    let buf = self.grad_buf(gamma);
                    for r in 0..rows {
                        let (mean, inv_std) = stats[r];
                        for f in 0..width {
                            let xhat = (xd[r * width + f] - mean) * inv_std;
                            buf[f] += g[r * width + f] * xhat;
                        }
                    }
                }
                if self.wants_grad(beta) {
                    let buf = self.grad_buf(beta);
                    for r in 0..rows {
                        for f in 0..width {
                            buf[f] += g[r * width + f];
                        }
                    }
                }
                if self.wants_grad(x) {
                    let buf = self.grad_buf(x);
                    let wf = width as f64;
                    for r in 0..rows {
                        let (mean, inv_std) = stats[r];
                        let gs = &g[r * width..(r + 1) * width];
                        let xs = &xd[r * width..(r + 1) * width];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for f in 0..width {
                            let dxhat = gs[f] * gd[f];
                            let xhat = (xs[f] - mean) * inv_std;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for f in 0..width {
                            let dxhat = gs[f] * gd[f];
                            let xhat = (xs[f] - mean) * inv_std;
                            buf[r * width + f] +=
                                inv_std * (dxhat - sum_dxhat / wf - xhat * sum_dxhat_xhat / wf);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                channels,
                mean,
                var,
                eps,
                train_stats,
            } => {
                let xd = self.nodes[x].value.data().to_vec();
                let gd = self.nodes[gamma].value.data().to_vec();
                let shape = self.nodes[x].value.shape().to_vec();
                let outer = shape[0];
                let inner: usize = shape[2..].iter().product();
                let m = (outer * inner) as f64;

                // xhat and per-channel reductions of the incoming gradient
                let mut sum_g = vec![0.0; channels];
                let mut sum_g_xhat = vec![0.0; channels];
                for n in 0..outer {
                    for c in 0..channels {
                        let inv_std = 1.0 / (var[c] + eps).sqrt();
                        let base = (n * channels + c) * inner;
                        for t in 0..inner {
                            let xhat = (xd[base + t] - mean[c]) * inv_std;
                            sum_g[c] += g[base + t];
                            sum_g_xhat[c] += g[base + t] * xhat;
                        }
                    }
                }
                if self.wants_grad(gamma) {
                    let buf = self.grad_buf(gamma);
                    for c in 0..channels {
                        buf[c] += sum_g_xhat[c];
                    }
                }
                if self.wants_grad(beta) {
                    let buf = self.grad_buf(beta);
                    for c in 0..channels {
                        buf[c] += sum_g[c];
                    }
                }
                if self.wants_grad(x) {
                    let buf = self.grad_buf(x);
                    for n in 0..outer {
                        for c in 0..channels {
                            let inv_std = 1.0 / (var[c] + eps).sqrt();
                            let base = (n * channels + c) * inner;
                            for t in 0..inner {
                                let gv = g[base + t];
                                if train_stats {
                                    let xhat = (xd[base + t] - mean[c]) * inv_std;
                                    buf[base + t] += gd[c]
                                        * inv_std
                                        * (gv - sum_g[c] / m - xhat * sum_g_xhat[c] / m);
                                } else {
                                    buf[base + t] += gv * gd[c] * inv_std;
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[node].value.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let axis_total = out_shape[axis];
                let mut offset = 0;
                for p in parts {
                    let plen = self.nodes[p].value.shape()[axis];
                    if self.wants_grad(p) {
                        let buf = self.grad_buf(p);
                        for o in 0..outer {
                            let src_base = (o * axis_total + offset) * inner;
                            let dst_base = o * plen * inner;
                            for i in 0..plen * inner {
                                buf[dst_base + i] += g[src_base + i];
                            }
                        }
                    }
                    offset += plen;
                }
            }
            Op::Slice {
                a,
                axis,
                start,
                len,
            } => {
                if self.wants_grad(a) {
                    let in_shape = self.nodes[a].value.shape().to_vec();
                    let outer: usize = in_shape[..axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let axis_len = in_shape[axis];
                    let buf = self.grad_buf(a);
                    for o in 0..outer {
                        let dst_base = (o * axis_len + start) * inner;
                        let src_base = o * len * inner;
                        for i in 0..len * inner {
                            buf[dst_base + i] += g[src_base + i];
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if self.wants_grad(a) {
                    for (d, &v) in self.grad_buf(a).iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::Embedding { table, ids, width } => {
                if self.wants_grad(table) {
                    let buf = self.grad_buf(table);
                    for (row, &id) in ids.iter().enumerate() {
                        for f in 0..width {
                            buf[id * width + f] += g[row * width + f];
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if self.wants_grad(a) {
                    for ((d, &v), &m) in self.grad_buf(a).iter_mut().zip(g).zip(&mask) {
                        *d += v * m;
                    }
                }
            }
            Op::SumAll { a } => {
                if self.wants_grad(a) {
                    let gv = g[0];
                    for d in self.grad_buf(a).iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::MeanAll { a } => {
                if self.wants_grad(a) {
                    let n = self.nodes[a].value.numel() as f64;
                    let gv = g[0] / n;
                    for d in self.grad_buf(a).iter_mut() {
                        *d += gv;
                    }
                }
            }
        }
    }
}
