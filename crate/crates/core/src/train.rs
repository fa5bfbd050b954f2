//! Quantile-loss training: pinball loss, adaptive-moment updates with
//! gradient clipping, and an early-stopping loop that returns the
//! best-validation parameter set.

// float math via the trait: test builds link std, the lib build must not
#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::params::{ParamStore, TapeBinding};
use crate::tensor::{Graph, Mode, Tensor, Var};
use crate::window::{batch_indices, GlobalDataset, WindowSample};
use crate::{rng_from_seed, Rng};

/// Per-step quantile predictions: `horizon x |quantiles|`, ascending within
/// each step after inference-time sorting.
pub type QuantileGrid = Vec<Vec<f64>>;

/// The contract both model families implement: a differentiable forward to
/// a `[batch, horizon, |quantiles|]` grid, plus derived loss and inference.
pub trait Forecaster {
    fn quantiles(&self) -> &[f64];
    fn lookback(&self) -> usize;
    fn horizon(&self) -> usize;

    /// Forward a batch to raw (unsorted) quantile predictions.
    fn forward_quantiles(
        &self,
        g: &mut Graph,
        tb: &mut TapeBinding,
        store: &ParamStore,
        samples: &[&WindowSample],
        rng: &mut Rng,
    ) -> Result<Var>;

    /// Mean pinball loss of a batch against its future targets.
    fn batch_loss(
        &self,
        g: &mut Graph,
        tb: &mut TapeBinding,
        store: &ParamStore,
        samples: &[&WindowSample],
        rng: &mut Rng,
    ) -> Result<Var> {
        let preds = self.forward_quantiles(g, tb, store, samples, rng)?;
        let targets = collect_targets(samples, self.horizon())?;
        pinball_loss(g, preds, &targets, self.quantiles())
    }

    /// Inference: eval-mode forward, quantile crossing resolved by sorting
    /// each horizon step ascending. Values are in the scaled target space.
    fn predict(&self, store: &ParamStore, samples: &[&WindowSample]) -> Result<Vec<QuantileGrid>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(Mode::Eval);
        let mut tb = TapeBinding::new(store);
        // eval mode never draws from the RNG (dropout is identity)
        let mut rng = rng_from_seed(0);
        let preds = self.forward_quantiles(&mut g, &mut tb, store, samples, &mut rng)?;
        let shape = g.shape(preds).to_vec();
        let (horizon, nq) = (shape[1], shape[2]);
        let data = g.value(preds).data();
        let mut out = Vec::with_capacity(samples.len());
        for b in 0..samples.len() {
            let mut grid = Vec::with_capacity(horizon);
            for t in 0..horizon {
                let base = (b * horizon + t) * nq;
                let mut step: Vec<f64> = data[base..base + nq].to_vec();
                step.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite quantiles"));
                grid.push(step);
            }
            out.push(grid);
        }
        Ok(out)
    }
}

/// Stack the future targets of a batch into a `[batch, horizon]` tensor.
pub fn collect_targets(samples: &[&WindowSample], horizon: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(samples.len() * horizon);
    for s in samples {
        let t = s.future_target.as_ref().ok_or_else(|| CoreError::InvalidArgument {
            what: format!(
                "county {} window at origin {} has no future target",
                s.county_id, s.origin
            ),
        })?;
        if t.len() != horizon {
            return Err(CoreError::shape(
                "collect_targets",
                format!("future length {} vs horizon {}", t.len(), horizon),
            ));
        }
        data.extend_from_slice(t);
    }
    Tensor::new(alloc::vec![samples.len(), horizon], data)
}

/// Mean over batch, steps, and quantiles of
/// `max(q * (y - yhat), (q - 1) * (y - yhat))`.
pub fn pinball_loss(
    g: &mut Graph,
    preds: Var,
    targets: &Tensor,
    quantiles: &[f64],
) -> Result<Var> {
    if let Some(&q) = quantiles.iter().find(|q| !(0.0 < **q && **q < 1.0)) {
        return Err(CoreError::InvalidArgument {
            what: format!("quantile {q} outside (0, 1)"),
        });
    }
    let pshape = g.shape(preds).to_vec();
    let tshape = targets.shape();
    if pshape.len() != 3
        || tshape.len() != 2
        || pshape[0] != tshape[0]
        || pshape[1] != tshape[1]
        || pshape[2] != quantiles.len()
    {
        return Err(CoreError::shape(
            "pinball_loss",
            format!(
                "predictions {:?} vs targets {:?} with {} quantiles",
                pshape,
                tshape,
                quantiles.len()
            ),
        ));
    }
    let nq = quantiles.len();
    // tile targets along the quantile axis
    let mut rep = Vec::with_capacity(targets.numel() * nq);
    for &y in targets.iter() {
        for _ in 0..nq {
            rep.push(y);
        }
    }
    let target_rep = g.constant(Tensor::new(pshape.clone(), rep)?);
    let diff = g.sub(target_rep, preds)?; // y - yhat
    let over = g.relu(diff); // y > yhat: under-prediction
    let neg_diff = g.neg(diff);
    let under = g.relu(neg_diff);
    let mut per_quantile = Vec::with_capacity(nq);
    for (qi, &q) in quantiles.iter().enumerate() {
        let o = g.slice(over, 2, qi, 1)?;
        let u = g.slice(under, 2, qi, 1)?;
        let o = g.scalar_mul(o, q);
        let u = g.scalar_mul(u, 1.0 - q);
        per_quantile.push(g.add(o, u)?);
    }
    let all = g.concat(&per_quantile, 2)?;
    Ok(g.mean_all(all))
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected adaptive-moment optimizer over a parameter store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let m = store
            .entries()
            .iter()
            .map(|e| alloc::vec![0.0; e.value.numel()])
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            learning_rate,
            step_count: 0,
            m,
            v,
        }
    }

    /// One update over every entry with a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (idx, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let values = store.entries_mut()[idx].value.data_mut();
            for ((p, &gr), (mi, vi)) in values
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gr;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gr * gr;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        for &v in g {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            grad_clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0
            || self.batch_size == 0
            || self.max_epochs == 0
            || self.grad_clip_norm <= 0.0
        {
            return Err(CoreError::InvalidConfig {
                what: "training hyperparameters must be positive".into(),
            });
        }
        if self.patience >= self.max_epochs {
            return Err(CoreError::InvalidConfig {
                what: format!(
                    "patience {} must be below max epochs {}",
                    self.patience, self.max_epochs
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

impl TrainHistory {
    pub fn best_validation_loss(&self) -> f64 {
        self.validation_loss[self.best_epoch]
    }
}

/// Mean loss over a dataset without touching parameters (eval mode).
pub fn evaluate_loss(
    model: &(impl Forecaster + ?Sized),
    store: &ParamStore,
    dataset: &GlobalDataset,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut rng = rng_from_seed(0);
    for chunk in dataset.samples.chunks(batch_size) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let mut g = Graph::new(Mode::Eval);
        let mut tb = TapeBinding::new(store);
        let loss = model.batch_loss(&mut g, &mut tb, store, &refs, &mut rng)?;
        total += g.value(loss).data()[0] * refs.len() as f64;
        count += refs.len();
    }
    Ok(total / count as f64)
}

/// Early-stopped training. On return the store holds the parameters of the
/// best validation epoch (running statistics included).
pub fn train(
    model: &(impl Forecaster + ?Sized),
    store: &mut ParamStore,
    train_ds: &GlobalDataset,
    val_ds: &GlobalDataset,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_ds.samples.is_empty() || val_ds.samples.is_empty() {
        return Err(CoreError::InvalidArgument {
            what: "training and validation datasets must be nonempty".into(),
        });
    }
    let mut rng = rng_from_seed(cfg.seed);
    let mut adam = Adam::new(store, cfg.learning_rate);
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        validation_loss: Vec::new(),
        best_epoch: 0,
        stopped_epoch: 0,
    };
    let mut best_val = f64::INFINITY;
    let mut best_params: Option<ParamStore> = None;
    let mut stale_epochs = 0usize;

    for epoch in 0..cfg.max_epochs {
        let epoch_seed = cfg
            .seed
            .wrapping_add((epoch as u64).wrapping_mul(0x9E3779B97F4A7C15));
        let batches = batch_indices(train_ds.samples.len(), cfg.batch_size, epoch_seed)?;
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in &batches {
            let refs: Vec<&WindowSample> = batch.iter().map(|&i| &train_ds.samples[i]).collect();
            let mut g = Graph::new(Mode::Train);
            let mut tb = TapeBinding::new(store);
            let loss = model.batch_loss(&mut g, &mut tb, store, &refs, &mut rng)?;
            let loss_value = g.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(CoreError::Diverged {
                    epoch,
                    detail: format!("batch loss became {loss_value}"),
                });
            }
            g.backward(loss)?;
            let mut grads = tb.collect_grads(&g, store);
            clip_global_norm(&mut grads, cfg.grad_clip_norm);
            adam.step(store, &grads);
            store.apply_batch_stats(g.take_batch_stat_updates());
            epoch_loss += loss_value * refs.len() as f64;
            seen += refs.len();
        }
        history.train_loss.push(epoch_loss / seen as f64);

        let val_loss = evaluate_loss(model, store, val_ds, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(CoreError::Diverged {
                epoch,
                detail: format!("validation loss became {val_loss}"),
            });
        }
        history.validation_loss.push(val_loss);
        history.stopped_epoch = epoch;

        if val_loss < best_val {
            best_val = val_loss;
            history.best_epoch = epoch;
            best_params = Some(store.clone());
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs > cfg.patience {
                break;
            }
        }
    }
    if let Some(best) = best_params {
        *store = best;
    }
    Ok(history)
}

/// Human-readable summary line for logs.
pub fn history_summary(h: &TrainHistory) -> String {
    format!(
        "epochs {} (best {} at val loss {:.6})",
        h.stopped_epoch + 1,
        h.best_epoch,
        h.best_validation_loss()
    )
}
