//! Reusable neural layers: dense, dilated causal convolution blocks, gated
//! residual networks, variable selection, an LSTM cell, and interpretable
//! multi-head attention.
//!
//! Blocks are plain containers of [`ParamId`]s into a shared [`ParamStore`];
//! they hold no tensors themselves, so read-only inference can share the
//! store across threads while training mutates it from a single writer.

// float math via the trait: test builds link std, the lib build must not
#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::params::{glorot_init, uniform_init, ParamId, ParamStore, TapeBinding};
use crate::tensor::{Graph, Tensor, Var};
use crate::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
/// Additive logit mask; exp underflows to exactly zero weight.
pub const MASK_NEG: f64 = -1.0e30;

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

/// Affine map `[n, in] -> [n, out]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_width: usize,
    pub out_width: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_width: usize,
        out_width: usize,
        rng: &mut Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), glorot_init(in_width, out_width, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![out_width]));
        Dense {
            w,
            b,
            in_width,
            out_width,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        tb: &mut TapeBinding,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var> {
        let w = tb.var(g, store, self.w);
        let b = tb.var(g, store, self.b);
        let h = g.matmul(x, w)?;
        g.add_bias(h, b)
    }
}

// ---------------------------------------------------------------------------
// Dilated causal convolution block
// ---------------------------------------------------------------------------

/// Affine parameters plus running statistics for one batch norm.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct BatchNormState {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNormState {
    fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNormState {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            running_mean: store.add_buffer(
                format!("{name}.running_mean"),
                Tensor::zeros(vec![channels]),
            ),
            running_var: store.add_buffer(
                format!("{name}.running_var"),
                Tensor::full(vec![channels], 1.0),
            ),
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        tb: &mut TapeBinding,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var> {
        let gamma = tb.var(g, store, self.gamma);
        let beta = tb.var(g, store, self.beta);
        g.batch_norm(
            x,
            gamma,
            beta,
            store.value(self.running_mean).data(),
            store.value(self.running_var).data(),
            (self.running_mean.0, self.running_var.0),
            BATCH_NORM_EPS,
            BATCH_NORM_MOMENTUM,
        )
    }
}

/// Two (conv -> batch norm -> ReLU) stages plus a residual connection, with
/// a 1x1 projection when channel counts differ. Output length equals input
/// length and position `t` never sees inputs after `t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DilatedCausalConvBlock {
    pub kernel_size: usize,
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    conv1_w: ParamId,
    conv1_b: ParamId,
    bn1: BatchNormState,
    conv2_w: ParamId,
    conv2_b: ParamId,
    bn2: BatchNormState,
    skip_proj: Option<(ParamId, ParamId)>,
}

impl DilatedCausalConvBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        dilation: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = (1.0 / (in_channels * kernel_size) as f64).sqrt();
        let conv1_w = store.add(
            format!("{name}.conv1.w"),
            uniform_init(vec![out_channels, in_channels, kernel_size], bound, rng),
        );
        let conv1_b = store.add(format!("{name}.conv1.b"), Tensor::zeros(vec![out_channels]));
        let bn1 = BatchNormState::new(store, &format!("{name}.bn1"), out_channels);
        let bound2 = (1.0 / (out_channels * kernel_size) as f64).sqrt();
        let conv2_w = store.add(
            format!("{name}.conv2.w"),
            uniform_init(vec![out_channels, out_channels, kernel_size], bound2, rng),
        );
        let conv2_b = store.add(format!("{name}.conv2.b"), Tensor::zeros(vec![out_channels]));
        let bn2 = BatchNormState::new(store, &format!("{name}.bn2"), out_channels);
        let skip_proj = if in_channels != out_channels {
            let w = store.add(
                format!("{name}.skip.w"),
                uniform_init(
                    vec![out_channels, in_channels, 1],
                    (1.0 / in_channels as f64).sqrt(),
                    rng,
                ),
            );
            let b = store.add(format!("{name}.skip.b"), Tensor::zeros(vec![out_channels]));
            Some((w, b))
        } else {
            None
        };
        DilatedCausalConvBlock {
            kernel_size,
            dilation,
            in_channels,
            out_channels,
            conv1_w,
            conv1_b,
            bn1,
            conv2_w,
            conv2_b,
            bn2,
            skip_proj,
        }
    }

    /// `[batch, in_channels, len] -> [batch, out_channels, len]`
    pub fn forward(
        &self,
        g: &mut Graph,
        tb: &mut TapeBinding,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[1] != self.in_channels {
            return Err(CoreError::shape(
                "conv_block",
                format!(
                    "expected [batch, {}, len], got {:?}",
                    self.in_channels, shape
                ),
            ));
        }
        let w1 = tb.var(g, store, self.conv1_w);
        let b1 = tb.var(g, store, self.conv1_b);
        let h = g.conv1d_causal(x, w1, b1, self.dilation)?;
        let h = self.bn1.forward(g, tb, store, h)?;
        let h = g.relu(h);
        let w2 = tb.var(g, store, self.conv2_w);
        let b2 = tb.var(g, store, self.conv2_b);
        let h = g.conv1d_causal(h, w2, b2, self.dilation)?;
        let h = self.bn2.forward(g, tb, store, h)?;
        let h = g.relu(h);
        let skip = match self.skip_proj {
            Some((w, b)) => {
                let wv = tb.var(g, store, w);
                let bv = tb.var(g, store, b);
                g.conv1d_causal(x, wv, bv, 1)?
            }
            None => x,
        };
        g.add(h, skip)
    }
}

/// The decoder analogue of the convolutional block: two
/// (dense -> batch norm -> ReLU) stages plus a residual connection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseResidualBlock {
    pub in_width: usize,
    pub out_width: usize,
    d1: Dense,
    bn1: BatchNormState,
    d2: Dense,
    bn2: BatchNormState,
    skip: Option<Dense>,
}

impl DenseResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_width: usize,
        out_width: usize,
        rng: &mut Rng,
    ) -> Self {
        let d1 = Dense::new(store, &format!("{name}.fc1"), in_width, out_width, rng);
        let bn1 = BatchNormState::new(store, &format!("{name}.bn1"), out_width);
        let d2 = Dense::new(store, &format!("{name}.fc2"), out_width, out_width, rng);
        let bn2 = BatchNormState::new(store, &format!("{name}.bn2"), out_width);
        let skip = if in_width != out_width {
            Some(Dense::new(store, &format!("{name}.skip"), in_width, out_width, rng))
        } else {
            None
        };
        DenseResidualBlock {
            in_width,
            out_width,
            d1,
            bn1,
            d2,
            bn2,
            skip,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        tb: &mut TapeBinding,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var> {
        let h = self.d1.forward(g, tb, store, x)?;
        let h = self.bn1.forward(g, tb, store, h)?;
        let h = g.relu(h);
        let h = self.d2.forward(g, tb, store, h)?;
        let h = self.bn2.forward(g, tb, store, h)?;
        let h = g.relu(h);
        let skip = match &self.skip {
            Some(proj) => proj.forward(g, tb, store, x)?,
            None => x,
        };
        g.add(h, skip)
    }
}

/// Sigmoid-gated linear unit: `sigmoid(W1 x + b1) * (W2 x + b2)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatedLinearUnit {
    gate: Dense,
    value: Dense,
}

impl GatedLinearUnit {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut Rng) -> Self {
        GatedLinearUnit {
            gate: Dense::new(store, &format!("{name}.gate"), width, width, rng),
            value: Dense::new(store, &format!("{name}.value"), width, width, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        tb: &mut TapeBinding,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var> {
        let gate_pre = self.gate.forward(g, tb, store, x)?;
        let gate = g.sigmoid(gate_pre);
        let value = self.value.forward(g, tb, store, x)?;
        g.mul(gate, value)
    }
}

/// Gated skip connection: `LayerNorm(skip + GLU(x))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateAddNorm {
    glu: GatedLinearUnit,
    ln_gamma: ParamId,
    ln_beta: ParamId,
}

impl GateAddNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut Rng) -> Self {
        GateAddNorm {
            glu: GatedLinearUnit::new(store, &format!("{name}.glu"), width, rng),
            ln_gamma: store.add(format!("{name}.ln.gamma"), Tensor::full(vec![width], 1.0)),
            ln_beta: store.add(format!("{name}.ln.beta"), Tensor::zeros(vec![width])),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        tb: &mut TapeBinding,
        store: &ParamStore,
        x: Var,
        skip: Var,
    ) -> Result<Var> {
        let gated = self.glu.forward(g, tb, store, x)?;
        let summed = g.add(skip, gated)?;
        let gamma = tb.var(g, store, self.ln_gamma);
        let beta = tb.var(g, store, self.ln_beta);
        g.layer_norm(summed, gamma, beta, LAYER_NORM_EPS)
    }
}

// ---------------------------------------------------------------------------
// Gated residual network
// ---------------------------------------------------------------------------

/// Dense path with ELU, a sigmoid-gated linear unit, a (projected) skip
/// connection, and layer normalization. With the dense-path weights at zero
/// the block reduces to the layer-normalized skip path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatedResidualNetwork {
    pub input_width: usize,
    pub hidden_width: usize,
    pub output_width: usize,
    pub context_width: Option<usize>,
    pub dropout: f64,
    dense_in: Dense,
    ctx_w: Option<ParamId>,
    dense_inner: Dense,
    gate: Dense,
    value: Dense,
    skip: Option<Dense>,
    ln_gamma: ParamId,
    ln_beta: ParamId,
}

impl GatedResidualNetwork {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_width: usize,
        hidden_width: usize,
        output_width: usize,
        context_width: Option<usize>,
        dropout: f64,
        rng: &mut Rng,
    ) -> Self {
        let dense_in = Dense::new(store, &format!("{name}.fc_in"), input_width, hidden_width, rng);
        let ctx_w = context_width
            .map(|cw| store.add(format!("{name}.ctx.w"), glorot_init(cw, hidden_width, rng)));
        let dense_inner = Dense::new(
            store,
            &format!("{name}.fc_inner"),
            hidden_width,
            output_width,
            rng,
        );
        let gate = Dense::new(store, &format!("{name}.gate"), output_width, output_width, rng);
        let value = Dense::new(store, &format!("{name}.value"), output_width, output_width, rng);
        let skip = if input_width != output_width {
            Some(Dense::new(
                store,
                &format!("{name}.skip"),
                input_width,
                output_width,
                rng,
            ))
        } else {
            None
        };
        let ln_gamma = store.add(format!("{name}.ln.gamma"), Tensor::full(vec![output_width], 1.0));
        let ln_beta = store.add(format!("{name}.ln.beta"), Tensor::zeros(vec![output_width]));
        GatedResidualNetwork {
            input_width,
            hidden_width,
            output_width,
            context_width,
            dropout,
            dense_in,
            ctx_w,
            dense_inner,
            gate,
            value,
            skip,
            ln_gamma,
            ln_beta,
        }
    }

    /// `x: [n, input_width]`, optional `context: [n, context_width]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        tb: &mut TapeBinding,
        store: &ParamStore,
        x: Var,
        context: Option<Var>,
        rng: &mut Rng,
    ) -> Result<Var> {
        match (self.context_width, context) {
            (None, Some(_)) => {
                return Err(CoreError::InvalidArgument {
                    what: "context supplied to a context-free gated residual network".into(),
                })
            }
            (Some(_), None) => {
                return Err(CoreError::InvalidArgument {
                    what: "configured context missing from gated residual network call".into(),
                })
            }
            _ => {}
        }
        let mut pre = self.dense_in.forward(g, tb, store, x)?;
        if let (Some(wid), Some(c)) = (self.ctx_w, context) {
            let w = tb.var(g, store, wid);
            let cv = g.matmul(c, w)?;
            pre = g.add(pre, cv)?;
        }
        let act = g.elu(pre);
        let inner = self.dense_inner.forward(g, tb, store, act)?;
        let inner = g.dropout(inner, self.dropout, rng)?;
        let gate_pre = self.gate.forward(g, tb, store, inner)?;
        let gate = g.sigmoid(gate_pre);
        let value = self.value.forward(g, tb, store, inner)?;
        let gated = g.mul(gate, value)?;
        let skip = match &self.skip {
            Some(proj) => proj.forward(g, tb, store, x)?,
            None => x,
        };
        let summed = g.add(skip, gated)?;
        let gamma = tb.var(g, store, self.ln_gamma);
        let beta = tb.var(g, store, self.ln_beta);
        g.layer_norm(summed, gamma, beta, LAYER_NORM_EPS)
    }
}

// ---------------------------------------------------------------------------
// Variable selection
// ---------------------------------------------------------------------------

/// Softmax-weighted combination of per-variable nonlinear transforms. The
/// weights are the model's variable-importance signal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariableSelectionUnit {
    pub num_vars: usize,
    pub width: usize,
    var_grns: Vec<GatedResidualNetwork>,
    selection_grn: GatedResidualNetwork,
}

impl VariableSelectionUnit {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        num_vars: usize,
        width: usize,
        context_width: Option<usize>,
        dropout: f64,
        rng: &mut Rng,
    ) -> Self {
        let var_grns = (0..num_vars)
            .map(|i| {
                GatedResidualNetwork::new(
                    store,
                    &format!("{name}.var{i}"),
                    width,
                    width,
                    width,
                    None,
                    dropout,
                    rng,
                )
            })
            .collect();
        let selection_grn = GatedResidualNetwork::new(
            store,
            &format!("{name}.selection"),
            num_vars * width,
            width,
            num_vars,
            context_width,
            dropout,
            rng,
        );
        VariableSelectionUnit {
            num_vars,
            width,
            var_grns,
            selection_grn,
        }
    }

    /// Each variable is an embedded `[n, width]` tensor. Returns the
    /// combined `[n, width]` representation and the row-stochastic
    /// selection weights `[n, num_vars]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        tb: &mut TapeBinding,
        store: &ParamStore,
        vars: &[Var],
        context: Option<Var>,
        rng: &mut Rng,
    ) -> Result<(Var, Var)> {
        if vars.is_empty() {
            return Err(CoreError::InvalidArgument {
                what: "variable selection over an empty variable list".into(),
            });
        }
        if vars.len() != self.num_vars {
            return Err(CoreError::shape(
                "variable_selection",
                format!("configured {} variables, got {}", self.num_vars, vars.len()),
            ));
        }
        let flat = g.concat(vars, 1)?;
        let logits = self
            .selection_grn
            .forward(g, tb, store, flat, context, rng)?;
        let weights = g.softmax_last(logits)?;
        let mut combined: Option<Var> = None;
        for (i, (&v, grn)) in vars.iter().zip(&self.var_grns).enumerate() {
            let transformed = grn.forward(g, tb, store, v, None, rng)?;
            let w_col = g.slice(weights, 1, i, 1)?;
            let n = g.shape(w_col)[0];
            let w_flat = g.reshape(w_col, vec![n])?;
            let scaled = g.row_scale(transformed, w_flat)?;
            combined = Some(match combined {
                Some(acc) => g.add(acc, scaled)?,
                None => scaled,
            });
        }
        Ok((combined.expect("nonempty"), weights))
    }
}

// ---------------------------------------------------------------------------
// LSTM cell
// ---------------------------------------------------------------------------

/// Single LSTM cell; the temporal stack unrolls it explicitly. Weights are
/// uniform in +/- 1/sqrt(hidden); the forget-gate bias starts at 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmCell {
    pub input_width: usize,
    pub hidden_width: usize,
    w_x: ParamId,
    w_h: ParamId,
    b: ParamId,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_width: usize,
        hidden_width: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (hidden_width as f64).sqrt();
        let w_x = store.add(
            format!("{name}.w_x"),
            uniform_init(vec![input_width, 4 * hidden_width], bound, rng),
        );
        let w_h = store.add(
            format!("{name}.w_h"),
            uniform_init(vec![hidden_width, 4 * hidden_width], bound, rng),
        );
        // gate order: input, forget, cell, output
        let mut bias = Tensor::zeros(vec![4 * hidden_width]);
        bias.data_mut()[hidden_width..2 * hidden_width].fill(1.0);
        let b = store.add(format!("{name}.b"), bias);
        LstmCell {
            input_width,
            hidden_width,
            w_x,
            w_h,
            b,
        }
    }

    /// One step: `x [batch, input]`, state `[batch, hidden]` each.
    pub fn step(
        &self,
        g: &mut Graph,
        tb: &mut TapeBinding,
        store: &ParamStore,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let wx = tb.var(g, store, self.w_x);
        let wh = tb.var(g, store, self.w_h);
        let b = tb.var(g, store, self.b);
        let gx = g.matmul(x, wx)?;
        let gh = g.matmul(h, wh)?;
        let pre = g.add(gx, gh)?;
        let pre = g.add_bias(pre, b)?;
        let hw = self.hidden_width;
        let i_gate = g.slice(pre, 1, 0, hw)?;
        let f_gate = g.slice(pre, 1, hw, hw)?;
        let g_gate = g.slice(pre, 1, 2 * hw, hw)?;
        let o_gate = g.slice(pre, 1, 3 * hw, hw)?;
        let i_act = g.sigmoid(i_gate);
        let f_act = g.sigmoid(f_gate);
        let g_act = g.tanh(g_gate);
        let o_act = g.sigmoid(o_gate);
        let keep = g.mul(f_act, c)?;
        let write = g.mul(i_act, g_act)?;
        let c_new = g.add(keep, write)?;
        let c_squashed = g.tanh(c_new);
        let h_new = g.mul(o_act, c_squashed)?;
        Ok((h_new, c_new))
    }
}

// ---------------------------------------------------------------------------
// Interpretable multi-head attention
// ---------------------------------------------------------------------------

/// Which projection is shared across heads. Sharing values (the default)
/// lets the head-averaged weight matrix explain the output exactly; sharing
/// keys keeps per-head values and concatenates them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSharing {
    SharedValues,
    SharedKeys,
}

/// Multi-head attention exposing the head-averaged weight matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterpretableMultiHeadAttention {
    pub heads: usize,
    pub width: usize,
    pub sharing: AttentionSharing,
    head_dim: usize,
    q_proj: Vec<ParamId>,
    k_proj: Vec<ParamId>,
    v_proj: Vec<ParamId>,
    out_proj: Dense,
}

impl InterpretableMultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        heads: usize,
        width: usize,
        sharing: AttentionSharing,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(CoreError::InvalidConfig {
                what: format!("attention width {width} not divisible by {heads} heads"),
            });
        }
        let head_dim = width / heads;
        let q_proj = (0..heads)
            .map(|h| store.add(format!("{name}.q{h}.w"), glorot_init(width, head_dim, rng)))
            .collect();
        let k_proj = match sharing {
            AttentionSharing::SharedKeys => {
                vec![store.add(format!("{name}.k.w"), glorot_init(width, head_dim, rng))]
            }
            AttentionSharing::SharedValues => (0..heads)
                .map(|h| store.add(format!("{name}.k{h}.w"), glorot_init(width, head_dim, rng)))
                .collect(),
        };
        let v_proj = match sharing {
            AttentionSharing::SharedValues => {
                vec![store.add(format!("{name}.v.w"), glorot_init(width, width, rng))]
            }
            AttentionSharing::SharedKeys => (0..heads)
                .map(|h| store.add(format!("{name}.v{h}.w"), glorot_init(width, head_dim, rng)))
                .collect(),
        };
        let out_proj = Dense::new(store, &format!("{name}.out"), width, width, rng);
        Ok(InterpretableMultiHeadAttention {
            heads,
            width,
            sharing,
            head_dim,
            q_proj,
            k_proj,
            v_proj,
            out_proj,
        })
    }

    /// Self- or cross-attention over `[batch, time, width]` tensors.
    /// Returns the attended output and the head-averaged weights
    /// `[batch, q_time, k_time]`. With `causal` set, weight on any position
    /// strictly after the query position is exactly zero.
    pub fn forward(
        &self,
        g: &mut Graph,
        tb: &mut TapeBinding,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        values: Var,
        causal: bool,
    ) -> Result<(Var, Var)> {
        let qsh = g.shape(queries).to_vec();
        let ksh = g.shape(keys).to_vec();
        let vsh = g.shape(values).to_vec();
        if qsh.len() != 3 || ksh.len() != 3 || vsh.len() != 3 {
            return Err(CoreError::shape(
                "attention",
                format!("expected rank-3 inputs, got {qsh:?} {ksh:?} {vsh:?}"),
            ));
        }
        if qsh[0] != ksh[0] || ksh != vsh || qsh[2] != self.width || ksh[2] != self.width {
            return Err(CoreError::shape(
                "attention",
                format!("incompatible q {qsh:?} / k {ksh:?} / v {vsh:?}"),
            ));
        }
        if causal && qsh[1] != ksh[1] {
            return Err(CoreError::shape(
                "attention",
                format!(
                    "causal mask requires square weights, got {} queries x {} keys",
                    qsh[1], ksh[1]
                ),
            ));
        }
        let (batch, q_time) = (qsh[0], qsh[1]);
        let k_time = ksh[1];
        let scale = 1.0 / (self.head_dim as f64).sqrt();

        let q_flat = g.reshape(queries, vec![batch * q_time, self.width])?;
        let k_flat = g.reshape(keys, vec![batch * k_time, self.width])?;

        let mask = if causal {
            let mut m = vec![0.0; batch * q_time * k_time];
            for b in 0..batch {
                for i in 0..q_time {
                    for j in (i + 1)..k_time {
                        m[(b * q_time + i) * k_time + j] = MASK_NEG;
                    }
                }
            }
            Some(g.constant(Tensor::new(vec![batch, q_time, k_time], m)?))
        } else {
            None
        };

        let mut weight_sum: Option<Var> = None;
        let mut head_weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let wq = tb.var(g, store, self.q_proj[h]);
            let wk = tb.var(
                g,
                store,
                self.k_proj[if self.k_proj.len() == 1 { 0 } else { h }],
            );
            let q = g.matmul(q_flat, wq)?;
            let q = g.reshape(q, vec![batch, q_time, self.head_dim])?;
            let k = g.matmul(k_flat, wk)?;
            let k = g.reshape(k, vec![batch, k_time, self.head_dim])?;
            let kt = g.transpose_last2(k)?;
            let scores = g.bmm(q, kt)?;
            let mut scores = g.scalar_mul(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let weights = g.softmax_last(scores)?;
            head_weights.push(weights);
            weight_sum = Some(match weight_sum {
                Some(acc) => g.add(acc, weights)?,
                None => weights,
            });
        }
        let mean_weights = g.scalar_mul(weight_sum.expect("heads >= 1"), 1.0 / self.heads as f64);

        let v_flat = g.reshape(values, vec![batch * k_time, self.width])?;
        let attended = match self.sharing {
            AttentionSharing::SharedValues => {
                let wv = tb.var(g, store, self.v_proj[0]);
                let v = g.matmul(v_flat, wv)?;
                let v = g.reshape(v, vec![batch, k_time, self.width])?;
                g.bmm(mean_weights, v)?
            }
            AttentionSharing::SharedKeys => {
                let mut parts = Vec::with_capacity(self.heads);
                for h in 0..self.heads {
                    let wv = tb.var(g, store, self.v_proj[h]);
                    let v = g.matmul(v_flat, wv)?;
                    let v = g.reshape(v, vec![batch, k_time, self.head_dim])?;
                    parts.push(g.bmm(head_weights[h], v)?);
                }
                g.concat(&parts, 2)?
            }
        };
        let flat = g.reshape(attended, vec![batch * q_time, self.width])?;
        let out = self.out_proj.forward(g, tb, store, flat)?;
        let out = g.reshape(out, vec![batch, q_time, self.width])?;
        Ok((out, mean_weights))
    }
}
