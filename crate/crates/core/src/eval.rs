//! Backtesting without retraining, the three accuracy metrics, and the
//! ablation report layout.
//!
//! Metrics are computed on inverse-scaled values (original cases per 100k);
//! the point forecast is the quantile nearest 0.5.

// float math via the trait: test builds link std, the lib build must not
#[allow(unused_imports)]
use num_traits::Float;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::panel::{CountyPanel, Region};
use crate::params::ParamStore;
use crate::train::{Forecaster, QuantileGrid};
use crate::window::{cut_window, CountyVocab, WindowSample};

/// Quantile sets must be strictly ascending and inside (0, 1).
pub fn validate_quantiles(quantiles: &[f64]) -> Result<()> {
    if quantiles.is_empty() {
        return Err(CoreError::InvalidConfig {
            what: "empty quantile set".into(),
        });
    }
    if quantiles.iter().any(|q| !(0.0 < *q && *q < 1.0)) {
        return Err(CoreError::InvalidConfig {
            what: format!("quantiles {quantiles:?} must lie in (0, 1)"),
        });
    }
    if quantiles.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CoreError::InvalidConfig {
            what: format!("quantiles {quantiles:?} must be strictly ascending"),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

/// MAE, SMAPE (bounded [0, 200], 0/0 terms count as 0), and CV
/// (100 * RMSE / mean actual; absent when the mean actual is zero).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub smape: f64,
    pub cv: Option<f64>,
}

pub fn compute_metrics(actual: &[f64], forecast: &[f64]) -> Result<Metrics> {
    if actual.is_empty() || actual.len() != forecast.len() {
        return Err(CoreError::InvalidArgument {
            what: format!(
                "metrics need equal nonzero lengths, got {} vs {}",
                actual.len(),
                forecast.len()
            ),
        });
    }
    let n = actual.len() as f64;
    let mut abs_sum = 0.0;
    let mut smape_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut actual_sum = 0.0;
    for (&y, &yhat) in actual.iter().zip(forecast) {
        let err = y - yhat;
        abs_sum += err.abs();
        sq_sum += err * err;
        actual_sum += y;
        let denom = y.abs() + yhat.abs();
        if denom > 0.0 {
            smape_sum += err.abs() / denom;
        }
    }
    let mean_actual = actual_sum / n;
    let rmse = (sq_sum / n).sqrt();
    Ok(Metrics {
        mae: abs_sum / n,
        smape: 200.0 * smape_sum / n,
        cv: if mean_actual == 0.0 {
            None
        } else {
            Some(100.0 * rmse / mean_actual)
        },
    })
}

// ---------------------------------------------------------------------------
// backtest
// ---------------------------------------------------------------------------

/// Rolling-origin evaluation over the test region. Retraining between
/// origins is deliberately not supported: the model parameters are read-only
/// for the whole pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BacktestPlan {
    pub horizon: usize,
    pub stride: usize,
}

impl Default for BacktestPlan {
    fn default() -> Self {
        BacktestPlan {
            horizon: 10,
            stride: 10,
        }
    }
}

impl BacktestPlan {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.stride == 0 {
            return Err(CoreError::InvalidConfig {
                what: "backtest horizon and stride must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// One multi-horizon forecast at one origin, in original target units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastBlock {
    pub county_id: String,
    /// Panel index of the first forecast day.
    pub origin: usize,
    /// Epoch day of the first forecast day.
    pub origin_day: i64,
    /// `horizon x |quantiles|`, ascending per step, clamped at zero.
    pub quantiles: QuantileGrid,
    pub actuals: Vec<f64>,
}

/// Pooled and per-county accuracy over one county set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountySetMetrics {
    pub pooled: Metrics,
    pub per_county: BTreeMap<String, Metrics>,
}

#[derive(Debug, Clone)]
pub struct BacktestResult {
    pub plan: BacktestPlan,
    pub blocks: Vec<ForecastBlock>,
    pub metrics: CountySetMetrics,
    /// Counties whose test region was shorter than one horizon.
    pub skipped_counties: Vec<String>,
}

/// Index of the quantile used as the point forecast (nearest 0.5).
pub fn median_index(quantiles: &[f64]) -> usize {
    let mut best = 0;
    for (i, q) in quantiles.iter().enumerate() {
        if (q - 0.5).abs() < (quantiles[best] - 0.5).abs() {
            best = i;
        }
    }
    best
}

/// Forecast origins covering a test region: the first at the region start,
/// then every `stride` days while a full horizon fits.
pub fn backtest_origins(
    test_range: core::ops::Range<usize>,
    horizon: usize,
    stride: usize,
) -> Vec<usize> {
    let mut origins = Vec::new();
    let mut t = test_range.start;
    while t + horizon <= test_range.end {
        origins.push(t);
        t += stride;
    }
    origins
}

/// Run the model over every county's test region. Model parameters are
/// bit-unchanged afterwards (enforced by the read-only store borrow and
/// asserted in the acceptance suite via fingerprints).
pub fn backtest(
    model: &(impl Forecaster + ?Sized),
    store: &ParamStore,
    panels: &[CountyPanel],
    vocab: &CountyVocab,
    plan: &BacktestPlan,
) -> Result<BacktestResult> {
    plan.validate()?;
    let lookback = model.lookback();
    if plan.horizon != model.horizon() {
        return Err(CoreError::InvalidConfig {
            what: format!(
                "backtest horizon {} differs from the model horizon {}",
                plan.horizon,
                model.horizon()
            ),
        });
    }
    let mut blocks = Vec::new();
    let mut skipped = Vec::new();
    let mut pooled_actual = Vec::new();
    let mut pooled_forecast = Vec::new();
    let mut per_county_pairs: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let med = median_index(model.quantiles());

    for panel in panels {
        let test_range = panel.split.range(Region::Test);
        if test_range.len() < plan.horizon {
            skipped.push(panel.county_id.clone());
            continue;
        }
        let origins = backtest_origins(test_range, plan.horizon, plan.stride);
        let windows: Vec<WindowSample> = origins
            .iter()
            .map(|&t| cut_window(panel, vocab, t, lookback, plan.horizon))
            .collect::<Result<_>>()?;
        let refs: Vec<&WindowSample> = windows.iter().collect();
        let grids = model.predict(store, &refs)?;
        for (origin, grid) in origins.iter().zip(grids) {
            let unscaled: QuantileGrid = grid
                .iter()
                .map(|step| {
                    step.iter()
                        .map(|&q| panel.target_scale.inverse(q).max(0.0))
                        .collect()
                })
                .collect();
            let actuals = panel.target[*origin..origin + plan.horizon].to_vec();
            let entry = per_county_pairs.entry(panel.county_id.clone()).or_default();
            for (step, actual) in unscaled.iter().zip(&actuals) {
                let point = step[med];
                pooled_actual.push(*actual);
                pooled_forecast.push(point);
                entry.0.push(*actual);
                entry.1.push(point);
            }
            blocks.push(ForecastBlock {
                county_id: panel.county_id.clone(),
                origin: *origin,
                origin_day: panel.start_day + *origin as i64,
                quantiles: unscaled,
                actuals,
            });
        }
    }
    if pooled_actual.is_empty() {
        return Err(CoreError::InvalidArgument {
            what: "backtest produced no forecasts (all counties skipped)".into(),
        });
    }
    let pooled = compute_metrics(&pooled_actual, &pooled_forecast)?;
    let per_county = per_county_pairs
        .into_iter()
        .map(|(county, (a, f))| Ok((county, compute_metrics(&a, &f)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(BacktestResult {
        plan: *plan,
        blocks,
        metrics: CountySetMetrics { pooled, per_county },
        skipped_counties: skipped,
    })
}

// ---------------------------------------------------------------------------
// ablation report
// ---------------------------------------------------------------------------

/// Display order and labels of the four ablation variants.
pub const ABLATION_VARIANTS: [(&str, &str); 4] = [
    ("tft", "TFT"),
    ("tft_no_viral", "TFT - no viral load"),
    ("deeptcn", "DeepTCN"),
    ("deeptcn_no_viral", "DeepTCN - no viral load"),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub label: String,
    pub mae: f64,
    pub smape: f64,
    pub cv: Option<f64>,
}

/// One table per county set, four variant rows each.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub county_set: String,
    pub rows: Vec<AblationRow>,
}

/// Assemble a county-set table from the four variants' backtests, checking
/// that every variant ran the same plan.
pub fn ablation_table(
    county_set: &str,
    variants: &[(&str, &BacktestResult)],
) -> Result<AblationTable> {
    if variants.is_empty() {
        return Err(CoreError::InvalidArgument {
            what: "ablation table needs at least one variant".into(),
        });
    }
    let plan = variants[0].1.plan;
    if variants.iter().any(|(_, r)| r.plan != plan) {
        return Err(CoreError::InvalidArgument {
            what: "ablation variants were backtested with different plans".into(),
        });
    }
    let rows = variants
        .iter()
        .map(|(key, result)| {
            let label = ABLATION_VARIANTS
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, l)| (*l).into())
                .unwrap_or_else(|| String::from(*key));
            AblationRow {
                variant: String::from(*key),
                label,
                mae: result.metrics.pooled.mae,
                smape: result.metrics.pooled.smape,
                cv: result.metrics.pooled.cv,
            }
        })
        .collect();
    Ok(AblationTable {
        county_set: county_set.into(),
        rows,
    })
}

/// Aligned plain-text rendering of the ablation tables.
pub fn render_ablation_text(tables: &[AblationTable]) -> String {
    let mut out = String::new();
    for table in tables {
        out.push_str(&format!("{} counties\n", table.county_set));
        out.push_str(&format!(
            "{:<26} {:>10} {:>10} {:>10}\n",
            "Model", "MAE", "SMAPE", "CV"
        ));
        for row in &table.rows {
            let cv = row
                .cv
                .map(|v| format!("{v:.2}"))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{:<26} {:>10.2} {:>10.2} {:>10}\n",
                row.label, row.mae, row.smape, cv
            ));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deeptcn::{DeepTcn, DeepTcnConfig};
    use crate::panel::{NamedSeries, ScaleParams, SplitBounds};
    use crate::rng_from_seed;
    use crate::window::InputSpec;
    use alloc::vec;

    #[test]
    fn mae_definition() {
        let m = compute_metrics(&[2.0, 4.0], &[1.0, 3.0]).unwrap();
        assert_eq!(m.mae, 1.0);
    }

    #[test]
    fn smape_hand_value() {
        let m = compute_metrics(&[100.0], &[50.0]).unwrap();
        assert!((m.smape - 200.0 * 50.0 / 150.0).abs() < 1e-9);
    }

    #[test]
    fn perfect_forecast_is_zero_everywhere() {
        let m = compute_metrics(&[10.0, 10.0], &[10.0, 10.0]).unwrap();
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.smape, 0.0);
        assert_eq!(m.cv, Some(0.0));
    }

    #[test]
    fn cv_absent_when_mean_actual_is_zero() {
        let m = compute_metrics(&[0.0, 0.0], &[1.0, 2.0]).unwrap();
        assert_eq!(m.cv, None);
        assert!(m.smape > 0.0);
    }

    #[test]
    fn smape_zero_over_zero_counts_as_zero() {
        let m = compute_metrics(&[0.0, 5.0], &[0.0, 5.0]).unwrap();
        assert_eq!(m.smape, 0.0);
    }

    #[test]
    fn metrics_reject_mismatched_lengths() {
        assert!(compute_metrics(&[1.0], &[1.0, 2.0]).is_err());
        assert!(compute_metrics(&[], &[]).is_err());
    }

    #[test]
    fn origin_counts_follow_the_fit_rule() {
        assert_eq!(backtest_origins(0..40, 10, 10).len(), 4);
        assert_eq!(backtest_origins(0..45, 10, 10).len(), 4);
        assert_eq!(backtest_origins(0..9, 10, 10).len(), 0);
    }

    #[test]
    fn median_index_finds_nearest_half() {
        assert_eq!(median_index(&[0.05, 0.5, 0.95]), 1);
        assert_eq!(median_index(&[0.1, 0.45, 0.9]), 1);
        assert_eq!(median_index(&[0.2, 0.8]), 0);
    }

    fn backtest_panel(county_id: &str, len: usize) -> CountyPanel {
        let target: Vec<f64> = (0..len).map(|i| 10.0 + (i as f64 * 0.3).sin() * 5.0).collect();
        let bounds = crate::panel::split_chronological(len, &Default::default()).unwrap();
        let scale = ScaleParams::fit(&target[..bounds.train_end]).unwrap();
        CountyPanel {
            county_id: county_id.into(),
            start_day: 100,
            target_scaled: scale.transform_all(&target),
            target,
            unknown: vec![NamedSeries {
                name: "viral_load".into(),
                values: (0..len).map(|i| (i as f64 * 0.2).cos() * 0.5 + 0.5).collect(),
            }],
            known: (0..2)
                .map(|k| NamedSeries {
                    name: alloc::format!("known{k}"),
                    values: (0..len).map(|i| ((i + k) as f64 * 0.1).sin() * 0.5 + 0.5).collect(),
                })
                .collect(),
            target_scale: scale,
            split: SplitBounds {
                train_end: bounds.train_end,
                validation_end: bounds.validation_end,
                len,
            },
        }
    }

    fn small_model(store: &mut ParamStore) -> DeepTcn {
        let mut rng = rng_from_seed(21);
        DeepTcn::new(
            store,
            DeepTcnConfig {
                kernel_size: 2,
                dilations: vec![1, 2, 4],
                channels: 4,
                decoder_hidden: 6,
                position_embed_width: 3,
                quantiles: vec![0.05, 0.5, 0.95],
            },
            InputSpec {
                lookback: 8,
                horizon: 10,
                unknown_names: vec!["viral_load".into()],
                known_names: vec!["known0".into(), "known1".into()],
            },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn backtest_blocks_and_parameter_freeze() {
        let mut store = ParamStore::new();
        let model = small_model(&mut store);
        // len 200 -> test region 200 - 160 = 40 -> 4 blocks at stride 10
        let panels = vec![backtest_panel("a", 200), backtest_panel("b", 200)];
        let vocab = CountyVocab::from_panels(&panels);
        let before = store.fingerprint();
        let result = backtest(&model, &store, &panels, &vocab, &BacktestPlan::default()).unwrap();
        assert_eq!(store.fingerprint(), before);
        assert_eq!(result.blocks.len(), 8);
        assert!(result.skipped_counties.is_empty());
        assert!(result.metrics.per_county.contains_key("a"));
        // quantiles ascend and are nonnegative in original units
        for block in &result.blocks {
            for step in &block.quantiles {
                assert!(step.windows(2).all(|w| w[0] <= w[1]));
                assert!(step.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn short_test_region_is_skipped_with_warning() {
        let mut store = ParamStore::new();
        let model = small_model(&mut store);
        let long = backtest_panel("long", 200);
        // 45-day panel: test region 9 < horizon 10
        let short = backtest_panel("short", 45);
        let vocab = CountyVocab::from_panels(&[long.clone(), short.clone()]);
        let result = backtest(
            &model,
            &store,
            &[long, short],
            &vocab,
            &BacktestPlan::default(),
        )
        .unwrap();
        assert_eq!(result.skipped_counties, vec![String::from("short")]);
    }

    #[test]
    fn ablation_layout_and_plan_check() {
        let mut store = ParamStore::new();
        let model = small_model(&mut store);
        let panels = vec![backtest_panel("a", 200)];
        let vocab = CountyVocab::from_panels(&panels);
        let r1 = backtest(&model, &store, &panels, &vocab, &BacktestPlan::default()).unwrap();
        let r2 = backtest(
            &model,
            &store,
            &panels,
            &vocab,
            &BacktestPlan {
                horizon: 10,
                stride: 5,
            },
        )
        .unwrap();
        let table = ablation_table(
            "training",
            &[
                ("tft", &r1),
                ("tft_no_viral", &r1),
                ("deeptcn", &r1),
                ("deeptcn_no_viral", &r1),
            ],
        )
        .unwrap();
        assert_eq!(table.rows.len(), 4);
        assert_eq!(table.rows[1].label, "TFT - no viral load");
        let text = render_ablation_text(&[table]);
        assert!(text.contains("DeepTCN - no viral load"));

        // mismatched plans must error
        assert!(ablation_table("training", &[("tft", &r1), ("deeptcn", &r2)]).is_err());
    }

    #[test]
    fn quantile_validation() {
        assert!(validate_quantiles(&[0.05, 0.5, 0.95]).is_ok());
        assert!(validate_quantiles(&[]).is_err());
        assert!(validate_quantiles(&[0.5, 0.5]).is_err());
        assert!(validate_quantiles(&[0.0, 0.5]).is_err());
        assert!(validate_quantiles(&[0.5, 1.0]).is_err());
    }
}
