//! Convolutional quantile forecaster: a stack of dilated causal
//! convolution blocks encodes the past target and past-only covariates;
//! a dense residual decoder transforms each horizon step's known
//! covariates (plus a learned horizon-position embedding) and combines
//! them with the encoder state; a linear head emits one value per
//! quantile, all horizon steps at once.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::blocks::{Dense, DenseResidualBlock, DilatedCausalConvBlock};
use crate::error::{CoreError, Result};
use crate::params::{uniform_init, ParamId, ParamStore, TapeBinding};
use crate::tensor::{Graph, Tensor, Var};
use crate::train::Forecaster;
use crate::window::{InputSpec, WindowSample};
use crate::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeepTcnConfig {
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub channels: usize,
    pub decoder_hidden: usize,
    pub position_embed_width: usize,
    pub quantiles: Vec<f64>,
}

impl Default for DeepTcnConfig {
    fn default() -> Self {
        DeepTcnConfig {
            kernel_size: 3,
            dilations: vec![1, 2, 4, 8, 16],
            channels: 32,
            decoder_hidden: 64,
            position_embed_width: 8,
            quantiles: vec![0.05, 0.5, 0.95],
        }
    }
}

impl DeepTcnConfig {
    /// Past steps influencing the last encoder position:
    /// `1 + (kernel - 1) * sum(dilations)`.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel_size - 1) * self.dilations.iter().sum::<usize>()
    }

    pub fn validate(&self, lookback: usize) -> Result<()> {
        if self.kernel_size < 2 || self.dilations.is_empty() || self.channels == 0 {
            return Err(CoreError::InvalidConfig {
                what: "kernel size >= 2, at least one dilation, and channels >= 1 required".into(),
            });
        }
        crate::eval::validate_quantiles(&self.quantiles)?;
        let rf = self.receptive_field();
        if rf < lookback {
            return Err(CoreError::InvalidConfig {
                what: format!(
                    "receptive field {rf} does not cover the look-back window {lookback}"
                ),
            });
        }
        Ok(())
    }
}

/// The assembled model; parameters live in the caller's [`ParamStore`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeepTcn {
    pub config: DeepTcnConfig,
    pub inputs: InputSpec,
    encoder: Vec<DilatedCausalConvBlock>,
    encoder_proj: Dense,
    position_embed: ParamId,
    decoder: DenseResidualBlock,
    head: Dense,
}

impl DeepTcn {
    pub fn new(
        store: &mut ParamStore,
        config: DeepTcnConfig,
        inputs: InputSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate(inputs.lookback)?;
        let enc_in = 1 + inputs.n_unknown();
        let mut encoder = Vec::with_capacity(config.dilations.len());
        for (i, &dilation) in config.dilations.iter().enumerate() {
            let in_ch = if i == 0 { enc_in } else { config.channels };
            encoder.push(DilatedCausalConvBlock::new(
                store,
                &format!("encoder.block{i}"),
                in_ch,
                config.channels,
                config.kernel_size,
                dilation,
                rng,
            ));
        }
        let encoder_proj = Dense::new(
            store,
            "encoder.proj",
            config.channels,
            config.decoder_hidden,
            rng,
        );
        let position_embed = store.add(
            "decoder.position_embed",
            uniform_init(
                vec![inputs.horizon, config.position_embed_width],
                0.1,
                rng,
            ),
        );
        let decoder = DenseResidualBlock::new(
            store,
            "decoder.block",
            inputs.n_known() + config.position_embed_width,
            config.decoder_hidden,
            rng,
        );
        let head = Dense::new(
            store,
            "head",
            config.decoder_hidden,
            config.quantiles.len(),
            rng,
        );
        Ok(DeepTcn {
            config,
            inputs,
            encoder,
            encoder_proj,
            position_embed,
            decoder,
            head,
        })
    }

    fn check_batch(&self, samples: &[&WindowSample]) -> Result<()> {
        if samples.is_empty() {
            return Err(CoreError::InvalidArgument {
                what: "empty batch".into(),
            });
        }
        for s in samples {
            if s.past_target.len() != self.inputs.lookback
                || s.past_unknown.len() != self.inputs.n_unknown()
                || s.known.len() != self.inputs.n_known()
                || s.known
                    .iter()
                    .any(|k| k.len() != self.inputs.lookback + self.inputs.horizon)
            {
                return Err(CoreError::shape(
                    "deeptcn_batch",
                    format!(
                        "county {} window at origin {} does not match the model inputs",
                        s.county_id, s.origin
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Encoder stack output `[batch, channels, lookback]`; exposed so tests
    /// can probe per-position causality.
    pub fn encode(
        &self,
        g: &mut Graph,
        tb: &mut TapeBinding,
        store: &ParamStore,
        samples: &[&WindowSample],
    ) -> Result<Var> {
        self.check_batch(samples)?;
        let (batch, lookback) = (samples.len(), self.inputs.lookback);
        let channels_in = 1 + self.inputs.n_unknown();
        let mut data = Vec::with_capacity(batch * channels_in * lookback);
        for s in samples {
            data.extend_from_slice(&s.past_target);
            for u in &s.past_unknown {
                data.extend_from_slice(u);
            }
        }
        let mut h = g.leaf(
            Tensor::new(vec![batch, channels_in, lookback], data)?,
            false,
        );
        for block in &self.encoder {
            h = block.forward(g, tb, store, h)?;
        }
        Ok(h)
    }
}

impl Forecaster for DeepTcn {
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
        _rng: &mut Rng,
    ) -> Result<Var> {
        let encoded = self.encode(g, tb, store, samples)?;
        let (batch, horizon) = (samples.len(), self.inputs.horizon);
        let lookback = self.inputs.lookback;
        let nq = self.config.quantiles.len();

        // encoder state at the forecast origin, broadcast to each horizon step
        let last = g.slice(encoded, 2, lookback - 1, 1)?;
        let state = g.reshape(last, vec![batch, self.config.channels])?;
        let state = self.encoder_proj.forward(g, tb, store, state)?;
        let state_rep = g.repeat_rows(state, horizon)?;

        // per-step known covariates plus a learned horizon-position embedding
        let n_known = self.inputs.n_known();
        let mut cov = Vec::with_capacity(batch * horizon * n_known);
        let mut pos_ids = Vec::with_capacity(batch * horizon);
        for s in samples {
            for h in 0..horizon {
                for series in &s.known {
                    cov.push(series[lookback + h]);
                }
                pos_ids.push(h);
            }
        }
        let cov = g.leaf(Tensor::new(vec![batch * horizon, n_known], cov)?, false);
        let table = tb.var(g, store, self.position_embed);
        let pos = g.embedding(table, &pos_ids)?;
        let dec_in = g.concat(&[cov, pos], 1)?;
        let dec_out = self.decoder.forward(g, tb, store, dec_in)?;

        let combined = g.add(dec_out, state_rep)?;
        let combined = g.relu(combined);
        let out = self.head.forward(g, tb, store, combined)?;
        g.reshape(out, vec![batch, horizon, nq])
    }
}
