//! Fusion-transformer quantile forecaster: per-variable embeddings feed
//! variable selection units on the encoder (past target, past-only
//! covariates, known covariates) and decoder (known covariates) sides, an
//! LSTM encoder/decoder provides positional structure, interpretable
//! multi-head attention with a causal mask spans the concatenated
//! past + horizon positions, and a linear head emits the quantile grid.
//!
//! County identity enters as the sole static input through an embedding
//! that conditions the selection networks; counties never seen in training
//! resolve to the mean of the trained embeddings.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    AttentionSharing, Dense, GateAddNorm, GatedResidualNetwork, InterpretableMultiHeadAttention,
    LstmCell, VariableSelectionUnit,
};
use crate::error::{CoreError, Result};
use crate::eval::validate_quantiles;
use crate::params::{uniform_init, ParamId, ParamStore, TapeBinding};
use crate::tensor::{Graph, Mode, Tensor, Var};
use crate::train::Forecaster;
use crate::window::{InputSpec, WindowSample};
use crate::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TftConfig {
    pub hidden: usize,
    pub heads: usize,
    pub lstm_layers: usize,
    pub dropout: f64,
    pub quantiles: Vec<f64>,
    pub static_embed_width: usize,
    pub attention_sharing: AttentionSharing,
    /// Condition on county identity. Disabled, the model is fully
    /// location-agnostic.
    pub use_static: bool,
}

impl Default for TftConfig {
    fn default() -> Self {
        TftConfig {
            hidden: 32,
            heads: 4,
            lstm_layers: 1,
            dropout: 0.1,
            quantiles: vec![0.05, 0.5, 0.95],
            static_embed_width: 8,
            attention_sharing: AttentionSharing::SharedValues,
            use_static: true,
        }
    }
}

impl TftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(CoreError::InvalidConfig {
                what: format!(
                    "hidden width {} must be a positive multiple of {} heads",
                    self.hidden, self.heads
                ),
            });
        }
        if self.lstm_layers == 0 {
            return Err(CoreError::InvalidConfig {
                what: "at least one recurrent layer required".into(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::InvalidConfig {
                what: format!("dropout {} outside [0, 1)", self.dropout),
            });
        }
        if self.use_static && self.static_embed_width == 0 {
            return Err(CoreError::InvalidConfig {
                what: "static embedding width must be positive".into(),
            });
        }
        validate_quantiles(&self.quantiles)
    }
}

/// Everything one forward pass exposes: predictions plus the interpretation
/// surfaces (selection weights, attention weights) and a per-position probe
/// used by causality checks.
#[derive(Debug, Clone, Copy)]
pub struct TftForward {
    /// `[batch, horizon, |quantiles|]`, unsorted.
    pub quantiles: Var,
    /// `[batch, lookback, n_encoder_vars]`, rows sum to 1.
    pub encoder_weights: Var,
    /// `[batch, horizon, n_decoder_vars]`, rows sum to 1.
    pub decoder_weights: Var,
    /// Head-averaged attention `[batch, lookback + horizon, lookback + horizon]`.
    pub attention: Var,
    /// Post-attention features `[batch, lookback + horizon, hidden]`.
    pub temporal_features: Var,
}

/// Aggregated variable importance, as percentages summing to 100 per side.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub encoder: Vec<(String, f64)>,
    pub decoder: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tft {
    pub config: TftConfig,
    pub inputs: InputSpec,
    /// Training-county vocabulary size backing the static embedding.
    pub n_counties: usize,
    enc_var_names: Vec<String>,
    dec_var_names: Vec<String>,
    embed_enc: Vec<Dense>,
    embed_dec: Vec<Dense>,
    static_embed: Option<ParamId>,
    static_ctx: Option<GatedResidualNetwork>,
    vsn_enc: VariableSelectionUnit,
    vsn_dec: VariableSelectionUnit,
    lstm_enc: Vec<LstmCell>,
    lstm_dec: Vec<LstmCell>,
    post_lstm: GateAddNorm,
    enrich: GatedResidualNetwork,
    attention: InterpretableMultiHeadAttention,
    post_attn: GateAddNorm,
    feed_forward: GatedResidualNetwork,
    final_gate: GateAddNorm,
    head: Dense,
}

impl Tft {
    pub fn new(
        store: &mut ParamStore,
        config: TftConfig,
        inputs: InputSpec,
        n_counties: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        if config.use_static && n_counties == 0 {
            return Err(CoreError::InvalidConfig {
                what: "static conditioning requires at least one training county".into(),
            });
        }
        let mut enc_var_names = vec![String::from("target")];
        enc_var_names.extend(inputs.unknown_names.iter().cloned());
        enc_var_names.extend(inputs.known_names.iter().cloned());
        let dec_var_names = inputs.known_names.clone();
        let d = config.hidden;
        let drop = config.dropout;

        let embed_enc = enc_var_names
            .iter()
            .map(|n| Dense::new(store, &format!("embed.enc.{n}"), 1, d, rng))
            .collect::<Vec<_>>();
        let embed_dec = dec_var_names
            .iter()
            .map(|n| Dense::new(store, &format!("embed.dec.{n}"), 1, d, rng))
            .collect::<Vec<_>>();

        let (static_embed, static_ctx, ctx_width) = if config.use_static {
            let table = store.add(
                "static.county_embed",
                uniform_init(vec![n_counties, config.static_embed_width], 0.1, rng),
            );
            let grn = GatedResidualNetwork::new(
                store,
                "static.context",
                config.static_embed_width,
                d,
                d,
                None,
                drop,
                rng,
            );
            (Some(table), Some(grn), Some(d))
        } else {
            (None, None, None)
        };

        let vsn_enc = VariableSelectionUnit::new(
            store,
            "select.encoder",
            enc_var_names.len(),
            d,
            ctx_width,
            drop,
            rng,
        );
        let vsn_dec = VariableSelectionUnit::new(
            store,
            "select.decoder",
            dec_var_names.len(),
            d,
            ctx_width,
            drop,
            rng,
        );
        let lstm_enc = (0..config.lstm_layers)
            .map(|l| LstmCell::new(store, &format!("lstm.encoder{l}"), d, d, rng))
            .collect();
        let lstm_dec = (0..config.lstm_layers)
            .map(|l| LstmCell::new(store, &format!("lstm.decoder{l}"), d, d, rng))
            .collect();
        let post_lstm = GateAddNorm::new(store, "temporal.gate", d, rng);
        let enrich = GatedResidualNetwork::new(
            store, "enrich", d, d, d, ctx_width, drop, rng,
        );
        let attention = InterpretableMultiHeadAttention::new(
            store,
            "attention",
            config.heads,
            d,
            config.attention_sharing,
            rng,
        )?;
        let post_attn = GateAddNorm::new(store, "attention.gate", d, rng);
        let feed_forward =
            GatedResidualNetwork::new(store, "feed_forward", d, d, d, None, drop, rng);
        let final_gate = GateAddNorm::new(store, "final.gate", d, rng);
        let head = Dense::new(store, "head", d, config.quantiles.len(), rng);
        Ok(Tft {
            config,
            inputs,
            n_counties,
            enc_var_names,
            dec_var_names,
            embed_enc,
            embed_dec,
            static_embed,
            static_ctx,
            vsn_enc,
            vsn_dec,
            lstm_enc,
            lstm_dec,
            post_lstm,
            enrich,
            attention,
            post_attn,
            feed_forward,
            final_gate,
            head,
        })
    }

    pub fn encoder_variable_names(&self) -> &[String] {
        &self.enc_var_names
    }

    pub fn decoder_variable_names(&self) -> &[String] {
        &self.dec_var_names
    }

    fn check_batch(&self, samples: &[&WindowSample]) -> Result<()> {
        if samples.is_empty() {
            return Err(CoreError::InvalidArgument {
                what: "empty batch".into(),
            });
        }
        let (k, tau) = (self.inputs.lookback, self.inputs.horizon);
        for s in samples {
            if s.past_target.len() != k
                || s.past_unknown.len() != self.inputs.n_unknown()
                || s.known.len() != self.inputs.n_known()
                || s.known.iter().any(|c| c.len() != k + tau)
            {
                return Err(CoreError::shape(
                    "tft_batch",
                    format!(
                        "county {} window at origin {} does not match the model inputs",
                        s.county_id, s.origin
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Static county embedding `[batch, embed_width]`. Training requires
    /// in-vocabulary counties; inference maps unknown counties to the mean
    /// of the trained embeddings.
    fn static_vectors(
        &self,
        g: &mut Graph,
        tb: &mut TapeBinding,
        store: &ParamStore,
        samples: &[&WindowSample],
    ) -> Result<Option<Var>> {
        let Some(table_id) = self.static_embed else {
            return Ok(None);
        };
        if g.mode() == Mode::Train {
            let ids = samples
                .iter()
                .map(|s| {
                    s.county_index.ok_or_else(|| CoreError::InvalidArgument {
                        what: format!(
                            "county {} is outside the training vocabulary; \
                             holdout counties are inference-only",
                            s.county_id
                        ),
                    })
                })
                .collect::<Result<Vec<usize>>>()?;
            let table = tb.var(g, store, table_id);
            Ok(Some(g.embedding(table, &ids)?))
        } else {
            let table = store.value(table_id);
            let width = self.config.static_embed_width;
            let rows = self.n_counties;
            let mut mean = vec![0.0; width];
            for r in 0..rows {
                for c in 0..width {
                    mean[c] += table.data()[r * width + c] / rows as f64;
                }
            }
            let mut data = Vec::with_capacity(samples.len() * width);
            for s in samples {
                match s.county_index {
                    Some(i) if i < rows => {
                        data.extend_from_slice(&table.data()[i * width..(i + 1) * width])
                    }
                    _ => data.extend_from_slice(&mean),
                }
            }
            Ok(Some(g.constant(Tensor::new(
                vec![samples.len(), width],
                data,
            )?)))
        }
    }

    /// Gather one raw variable as a `[batch * time, 1]` column.
    fn column(
        g: &mut Graph,
        values: impl Iterator<Item = f64>,
        rows: usize,
    ) -> Result<Var> {
        let data: Vec<f64> = values.collect();
        debug_assert_eq!(data.len(), rows);
        Ok(g.leaf(Tensor::new(vec![rows, 1], data)?, false))
    }

    fn unroll_lstm(
        &self,
        g: &mut Graph,
        tb: &mut TapeBinding,
        store: &ParamStore,
        cells: &[LstmCell],
        seq: Var, // [batch, time, hidden]
        init: Option<Vec<(Var, Var)>>,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        let shape = g.shape(seq).to_vec();
        let (batch, time, d) = (shape[0], shape[1], shape[2]);
        let mut layer_input = seq;
        let mut finals = Vec::with_capacity(cells.len());
        for (l, cell) in cells.iter().enumerate() {
            let (mut h, mut c) = match &init {
                Some(states) => states[l],
                None => {
                    let z1 = g.constant(Tensor::zeros(vec![batch, d]));
                    let z2 = g.constant(Tensor::zeros(vec![batch, d]));
                    (z1, z2)
                }
            };
            let mut outputs = Vec::with_capacity(time);
            for t in 0..time {
                let x_t = g.slice(layer_input, 1, t, 1)?;
                let x_t = g.reshape(x_t, vec![batch, d])?;
                let (h2, c2) = cell.step(g, tb, store, x_t, h, c)?;
                h = h2;
                c = c2;
                outputs.push(g.reshape(h, vec![batch, 1, d])?);
            }
            layer_input = g.concat(&outputs, 1)?;
            finals.push((h, c));
        }
        Ok((layer_input, finals))
    }

    /// Full forward pass with interpretation surfaces.
    pub fn forward(
        &self,
        g: &mut Graph,
        tb: &mut TapeBinding,
        store: &ParamStore,
        samples: &[&WindowSample],
        rng: &mut Rng,
    ) -> Result<TftForward> {
        self.check_batch(samples)?;
        let (batch, k, tau) = (samples.len(), self.inputs.lookback, self.inputs.horizon);
        let d = self.config.hidden;
        let total = k + tau;
        let n_unknown = self.inputs.n_unknown();

        // static context, broadcast per position
        let static_vec = self.static_vectors(g, tb, store, samples)?;
        let context = match (&self.static_ctx, static_vec) {
            (Some(grn), Some(emb)) => Some(grn.forward(g, tb, store, emb, None, rng)?),
            _ => None,
        };
        let ctx_k = match context {
            Some(c) => Some(g.repeat_rows(c, k)?),
            None => None,
        };
        let ctx_tau = match context {
            Some(c) => Some(g.repeat_rows(c, tau)?),
            None => None,
        };
        let ctx_total = match context {
            Some(c) => Some(g.repeat_rows(c, total)?),
            None => None,
        };

        // per-variable embeddings: encoder sees the past window of
        // everything, the decoder sees the horizon of known covariates
        let mut enc_vars = Vec::with_capacity(self.enc_var_names.len());
        for (vi, embed) in self.embed_enc.iter().enumerate() {
            let col = if vi == 0 {
                Self::column(
                    g,
                    samples.iter().flat_map(|s| s.past_target.iter().copied()),
                    batch * k,
                )?
            } else if vi < 1 + n_unknown {
                let u = vi - 1;
                Self::column(
                    g,
                    samples.iter().flat_map(|s| s.past_unknown[u].iter().copied()),
                    batch * k,
                )?
            } else {
                let c = vi - 1 - n_unknown;
                Self::column(
                    g,
                    samples.iter().flat_map(|s| s.known[c][..k].iter().copied()),
                    batch * k,
                )?
            };
            enc_vars.push(embed.forward(g, tb, store, col)?);
        }
        let mut dec_vars = Vec::with_capacity(self.dec_var_names.len());
        for (c, embed) in self.embed_dec.iter().enumerate() {
            let col = Self::column(
                g,
                samples.iter().flat_map(|s| s.known[c][k..].iter().copied()),
                batch * tau,
            )?;
            dec_vars.push(embed.forward(g, tb, store, col)?);
        }

        let (enc_combined, enc_weights) =
            self.vsn_enc.forward(g, tb, store, &enc_vars, ctx_k, rng)?;
        let (dec_combined, dec_weights) =
            self.vsn_dec.forward(g, tb, store, &dec_vars, ctx_tau, rng)?;

        // recurrent positional encoding over past, continued into horizon
        let enc_seq = g.reshape(enc_combined, vec![batch, k, d])?;
        let dec_seq = g.reshape(dec_combined, vec![batch, tau, d])?;
        let (enc_lstm, enc_state) = self.unroll_lstm(g, tb, store, &self.lstm_enc, enc_seq, None)?;
        let (dec_lstm, _) =
            self.unroll_lstm(g, tb, store, &self.lstm_dec, dec_seq, Some(enc_state))?;
        let lstm_out = g.concat(&[enc_lstm, dec_lstm], 1)?;
        let lstm_flat = g.reshape(lstm_out, vec![batch * total, d])?;
        let vsn_seq = g.concat(&[enc_seq, dec_seq], 1)?;
        let vsn_flat = g.reshape(vsn_seq, vec![batch * total, d])?;
        let temporal = self.post_lstm.forward(g, tb, store, lstm_flat, vsn_flat)?;

        // static enrichment, then causal self-attention over all positions
        let enriched = self.enrich.forward(g, tb, store, temporal, ctx_total, rng)?;
        let enriched_seq = g.reshape(enriched, vec![batch, total, d])?;
        let (attn_out, attn_weights) =
            self.attention
                .forward(g, tb, store, enriched_seq, enriched_seq, enriched_seq, true)?;
        let attn_flat = g.reshape(attn_out, vec![batch * total, d])?;
        let gated = self.post_attn.forward(g, tb, store, attn_flat, enriched)?;
        let ff = self.feed_forward.forward(g, tb, store, gated, None, rng)?;
        let features = self.final_gate.forward(g, tb, store, ff, temporal)?;
        let features_seq = g.reshape(features, vec![batch, total, d])?;

        // quantile head on the horizon positions only
        let horizon_feat = g.slice(features_seq, 1, k, tau)?;
        let horizon_flat = g.reshape(horizon_feat, vec![batch * tau, d])?;
        let out = self.head.forward(g, tb, store, horizon_flat)?;
        let quantiles = g.reshape(out, vec![batch, tau, self.config.quantiles.len()])?;

        Ok(TftForward {
            quantiles,
            encoder_weights: g.reshape(enc_weights, vec![batch, k, self.enc_var_names.len()])?,
            decoder_weights: g.reshape(dec_weights, vec![batch, tau, self.dec_var_names.len()])?,
            attention: attn_weights,
            temporal_features: features_seq,
        })
    }

    /// Mean selection weight per variable over all positions and samples,
    /// reported as percentages summing to 100 per side.
    pub fn explain(
        &self,
        store: &ParamStore,
        samples: &[&WindowSample],
        batch_size: usize,
    ) -> Result<ImportanceReport> {
        if samples.is_empty() {
            return Err(CoreError::InvalidArgument {
                what: "variable importance needs at least one sample".into(),
            });
        }
        let n_enc = self.enc_var_names.len();
        let n_dec = self.dec_var_names.len();
        let mut enc_sum = vec![0.0; n_enc];
        let mut dec_sum = vec![0.0; n_dec];
        let mut enc_rows = 0usize;
        let mut dec_rows = 0usize;
        let mut rng = crate::rng_from_seed(0);
        for chunk in samples.chunks(batch_size.max(1)) {
            let mut g = Graph::new(Mode::Eval);
            let mut tb = TapeBinding::new(store);
            let fwd = self.forward(&mut g, &mut tb, store, chunk, &mut rng)?;
            let ew = g.value(fwd.encoder_weights).data();
            for row in ew.chunks_exact(n_enc) {
                for (s, &w) in enc_sum.iter_mut().zip(row) {
                    *s += w;
                }
                enc_rows += 1;
            }
            let dw = g.value(fwd.decoder_weights).data();
            for row in dw.chunks_exact(n_dec) {
                for (s, &w) in dec_sum.iter_mut().zip(row) {
                    *s += w;
                }
                dec_rows += 1;
            }
        }
        let encoder = self
            .enc_var_names
            .iter()
            .zip(&enc_sum)
            .map(|(n, s)| (n.clone(), 100.0 * s / enc_rows as f64))
            .collect();
        let decoder = self
            .dec_var_names
            .iter()
            .zip(&dec_sum)
            .map(|(n, s)| (n.clone(), 100.0 * s / dec_rows as f64))
            .collect();
        Ok(ImportanceReport { encoder, decoder })
    }
}

impl Forecaster for Tft {
    fn quantiles(&self) -> &[f64] {
        &self.config.quantiles
    }

    fn lookback(&self) -> usize {
        self.inputs.lookback
    }

    fn horizon(&self) -> usize {
        self.inputs.horizon
    }

    fn forward_quantiles(
        &self,
        g: &mut Graph,
        tb: &mut TapeBinding,
        store: &ParamStore,
        samples: &[&WindowSample],
        rng: &mut Rng,
    ) -> Result<Var> {
        Ok(self.forward(g, tb, store, samples, rng)?.quantiles)
    }
}
