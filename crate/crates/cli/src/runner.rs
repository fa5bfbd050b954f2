//! Subcommand orchestration: every experiment stage reads one config,
//! stamps its artifacts with the config hash and seed, and records a run
//! manifest.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use epicast_core::eval::{
    ablation_table, backtest, AblationTable, BacktestResult, Metrics, render_ablation_text,
};
use epicast_core::panel::{CountyPanel, Region};
use epicast_core::params::ParamStore;
use epicast_core::synth::generate;
use epicast_core::tft::ImportanceReport;
use epicast_core::train::{train, TrainHistory};
use epicast_core::window::{make_windows, CountyVocab, GlobalDataset, InputSpec, WindowSample};
use serde::Serialize;

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::config::{ExperimentConfig, ModelFamily};
use crate::dates::parse_day;
use crate::error::{AppError, Result};
use crate::pipeline::{build_panels, drop_unknown, PipelineOutput};
use crate::plot::{forecast_svg, importance_svg};
use crate::rawio::{
    load_all, load_forecasts_csv, write_forecasts_csv, write_json, write_panel_cache,
    write_synth_csvs, Provenance, RawPaths,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Preprocess,
    Train,
    Backtest,
    Ablate,
    Explain,
    Synth,
    Plot,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Preprocess => "preprocess",
            Subcommand::Train => "train",
            Subcommand::Backtest => "backtest",
            Subcommand::Ablate => "ablate",
            Subcommand::Explain => "explain",
            Subcommand::Synth => "synth",
            Subcommand::Plot => "plot",
        }
    }
}

pub struct RunContext {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub out_dir: PathBuf,
}

impl RunContext {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let config_hash = config.hash();
        let out_dir = config.out_dir.clone();
        std::fs::create_dir_all(&out_dir).map_err(|e| AppError::io(&out_dir, e))?;
        Ok(RunContext {
            config,
            config_hash,
            out_dir,
        })
    }

    fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.config_hash.clone(),
            seed: self.config.seed,
        }
    }
}

/// Dispatch one subcommand and write the run manifest.
pub fn run(cmd: Subcommand, ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let started = Instant::now();
    let artifacts = match cmd {
        Subcommand::Preprocess => run_preprocess(ctx)?,
        Subcommand::Train => run_train(ctx)?,
        Subcommand::Backtest => run_backtest(ctx)?,
        Subcommand::Ablate => run_ablate(ctx)?,
        Subcommand::Explain => run_explain(ctx)?,
        Subcommand::Synth => run_synth(ctx)?,
        Subcommand::Plot => run_plot(ctx)?,
    };
    let manifest_path = ctx.out_dir.join("run-manifest.json");
    write_json(
        &manifest_path,
        &serde_json::json!({
            "subcommand": cmd.name(),
            "config_hash": ctx.config_hash,
            "seed": ctx.config.seed,
            "duration_ms": started.elapsed().as_millis() as u64,
            "artifacts": artifacts.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        }),
    )?;
    Ok(artifacts)
}

// ---------------------------------------------------------------------------
// shared preparation
// ---------------------------------------------------------------------------

/// Load the raw records: either from configured paths, or by materializing
/// the synthetic bundle to CSV and re-ingesting it, so the synthetic path
/// exercises the full pipeline.
fn load_raw(ctx: &RunContext) -> Result<crate::rawio::RawRecords> {
    if let Some(paths) = &ctx.config.data {
        return load_all(&RawPaths {
            cases: paths.cases.clone(),
            viral: paths.viral.clone(),
            oxford: paths.oxford.clone(),
            county_map: paths.county_map.clone(),
        });
    }
    let synth_cfg = ctx.config.synth.as_ref().expect("validated");
    let mut synth_cfg = synth_cfg.clone();
    synth_cfg.seed = ctx.config.seed;
    let output = generate(&synth_cfg)?;
    let start_day = parse_day(&ctx.config.synth_start_date)?;
    let dir = ctx.out_dir.join("synth_data");
    let paths = write_synth_csvs(&dir, &output, start_day, &ctx.provenance())?;
    load_all(&paths)
}

struct Prepared {
    pipeline: PipelineOutput,
    train_panels: Vec<CountyPanel>,
    holdout_panels: Vec<CountyPanel>,
    vocab: CountyVocab,
}

fn prepare(ctx: &RunContext, config: &ExperimentConfig) -> Result<Prepared> {
    let raw = load_raw(ctx)?;
    let pipeline = build_panels(&raw, config)?;
    for (county, reason) in &pipeline.excluded {
        eprintln!("note: excluding county {county}: {reason}");
    }
    let (train_panels, holdout_panels) = pipeline.partition(&config.holdout_counties);
    if train_panels.is_empty() {
        return Err(AppError::Other("no training counties remain".into()));
    }
    for h in &config.holdout_counties {
        if !holdout_panels.iter().any(|p| &p.county_id == h) {
            return Err(AppError::config(
                "holdout_counties",
                format!("county `{h}` not present in the built panels"),
            ));
        }
    }
    let vocab = CountyVocab::from_panels(&train_panels);
    Ok(Prepared {
        pipeline,
        train_panels,
        holdout_panels,
        vocab,
    })
}

fn build_datasets(
    config: &ExperimentConfig,
    panels: &[CountyPanel],
    vocab: &CountyVocab,
) -> Result<(GlobalDataset, GlobalDataset)> {
    let w = &config.window;
    let train_ds = make_windows(
        panels,
        vocab,
        Region::Train,
        w.lookback,
        w.horizon,
        w.train_stride,
    )?;
    let val_ds = make_windows(panels, vocab, Region::Validation, w.lookback, w.horizon, 1)?;
    Ok((train_ds, val_ds))
}

fn build_model(
    config: &ExperimentConfig,
    family: ModelFamily,
    panels: &[CountyPanel],
    vocab: &CountyVocab,
) -> Result<(ParamStore, ModelKind)> {
    let spec = InputSpec::from_panels(panels, config.window.lookback, config.window.horizon)?;
    let mut store = ParamStore::new();
    let mut rng = epicast_core::rng_from_seed(config.seed);
    let model = match family {
        ModelFamily::Tft => ModelKind::Tft(epicast_core::tft::Tft::new(
            &mut store,
            config.tft_config(),
            spec,
            vocab.len(),
            &mut rng,
        )?),
        ModelFamily::DeepTcn => ModelKind::DeepTcn(epicast_core::deeptcn::DeepTcn::new(
            &mut store,
            config.deeptcn_config(),
            spec,
            &mut rng,
        )?),
    };
    Ok((store, model))
}

struct TrainedVariant {
    key: String,
    checkpoint: Checkpoint,
    history: TrainHistory,
}

fn train_variant(
    ctx: &RunContext,
    config: &ExperimentConfig,
    family: ModelFamily,
    use_viral: bool,
    prepared: &Prepared,
) -> Result<TrainedVariant> {
    let key = match (family, use_viral) {
        (ModelFamily::Tft, true) => "tft",
        (ModelFamily::Tft, false) => "tft_no_viral",
        (ModelFamily::DeepTcn, true) => "deeptcn",
        (ModelFamily::DeepTcn, false) => "deeptcn_no_viral",
    };
    let panels = if use_viral {
        prepared.train_panels.clone()
    } else {
        drop_unknown(&prepared.train_panels, "viral_load")
    };
    let (train_ds, val_ds) = build_datasets(config, &panels, &prepared.vocab)?;
    let (mut store, model) = build_model(config, family, &panels, &prepared.vocab)?;
    let history = train(
        model.as_forecaster(),
        &mut store,
        &train_ds,
        &val_ds,
        &config.train,
    )?;
    eprintln!(
        "{key}: trained {} ({} train windows, {} val windows)",
        epicast_core::train::history_summary(&history),
        train_ds.samples.len(),
        val_ds.samples.len()
    );
    let checkpoint = Checkpoint {
        config_hash: ctx.config_hash.clone(),
        seed: config.seed,
        variant: key.into(),
        quantiles: config.quantiles.clone(),
        scale_fingerprint: prepared.pipeline.scale_fingerprint(),
        vocab: prepared.vocab.clone(),
        model,
        params: store,
    };
    Ok(TrainedVariant {
        key: key.into(),
        checkpoint,
        history,
    })
}

fn backtest_variant(
    config: &ExperimentConfig,
    ckpt: &Checkpoint,
    train_panels: &[CountyPanel],
    holdout_panels: &[CountyPanel],
    use_viral: bool,
) -> Result<(BacktestResult, Option<BacktestResult>)> {
    let model = ckpt.model.as_forecaster();
    let train_set = if use_viral {
        train_panels.to_vec()
    } else {
        drop_unknown(train_panels, "viral_load")
    };
    let training = backtest(model, &ckpt.params, &train_set, &ckpt.vocab, &config.backtest)?;
    for county in &training.skipped_counties {
        eprintln!("warning: test region shorter than one horizon, skipping {county}");
    }
    let holdout = if holdout_panels.is_empty() {
        None
    } else {
        let holdout_set = if use_viral {
            holdout_panels.to_vec()
        } else {
            drop_unknown(holdout_panels, "viral_load")
        };
        Some(backtest(
            model,
            &ckpt.params,
            &holdout_set,
            &ckpt.vocab,
            &config.backtest,
        )?)
    };
    Ok((training, holdout))
}

// ---------------------------------------------------------------------------
// metrics / importance documents
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct VariantMetricsDoc {
    mae: f64,
    smape: f64,
    cv: Option<f64>,
    per_county: BTreeMap<String, Metrics>,
}

#[derive(Serialize)]
struct MetricsDoc {
    config_hash: String,
    seed: u64,
    county_sets: BTreeMap<String, BTreeMap<String, VariantMetricsDoc>>,
}

fn variant_metrics(result: &BacktestResult) -> VariantMetricsDoc {
    VariantMetricsDoc {
        mae: result.metrics.pooled.mae,
        smape: result.metrics.pooled.smape,
        cv: result.metrics.pooled.cv,
        per_county: result.metrics.per_county.clone(),
    }
}

#[derive(Serialize)]
struct ImportanceDoc {
    config_hash: String,
    seed: u64,
    encoder: Vec<(String, f64)>,
    decoder: Vec<(String, f64)>,
}

fn importance_doc(ctx: &RunContext, report: &ImportanceReport) -> ImportanceDoc {
    ImportanceDoc {
        config_hash: ctx.config_hash.clone(),
        seed: ctx.config.seed,
        encoder: report.encoder.clone(),
        decoder: report.decoder.clone(),
    }
}

#[derive(Serialize)]
struct HistoryDoc<'a> {
    config_hash: &'a str,
    seed: u64,
    variant: &'a str,
    #[serde(flatten)]
    history: &'a TrainHistory,
}

/// Test-region windows (stride 1) over the training counties, used for
/// importance aggregation.
fn explain_windows(
    config: &ExperimentConfig,
    panels: &[CountyPanel],
    vocab: &CountyVocab,
) -> Result<Vec<WindowSample>> {
    let ds = make_windows(
        panels,
        vocab,
        Region::Test,
        config.window.lookback,
        config.window.horizon,
        1,
    )?;
    Ok(ds.samples)
}

fn compute_importance(
    config: &ExperimentConfig,
    ckpt: &Checkpoint,
    train_panels: &[CountyPanel],
    use_viral: bool,
) -> Result<ImportanceReport> {
    let Some(tft) = ckpt.model.as_tft() else {
        return Err(AppError::Other(
            "variable importance requires a fusion-transformer checkpoint".into(),
        ));
    };
    let panels = if use_viral {
        train_panels.to_vec()
    } else {
        drop_unknown(train_panels, "viral_load")
    };
    let windows = explain_windows(config, &panels, &ckpt.vocab)?;
    let refs: Vec<&WindowSample> = windows.iter().collect();
    Ok(tft.explain(&ckpt.params, &refs, config.train.batch_size)?)
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

fn run_preprocess(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let prepared = prepare(ctx, &ctx.config)?;
    let dir = ctx.out_dir.join("panels");
    let mut artifacts = write_panel_cache(&dir, &prepared.pipeline.panels, &ctx.provenance())?;
    let report = ctx.out_dir.join("preprocess-report.json");
    write_json(
        &report,
        &serde_json::json!({
            "config_hash": ctx.config_hash,
            "seed": ctx.config.seed,
            "counties": prepared.pipeline.panels.iter().map(|p| p.county_id.clone()).collect::<Vec<_>>(),
            "excluded": prepared.pipeline.excluded,
            "scale_fingerprint": format!("{:016x}", prepared.pipeline.scale_fingerprint()),
        }),
    )?;
    artifacts.push(report);
    Ok(artifacts)
}

fn run_train(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let config = &ctx.config;
    let prepared = prepare(ctx, config)?;
    let variant = train_variant(
        ctx,
        config,
        config.model.family,
        config.model.use_viral,
        &prepared,
    )?;
    let ckpt_path = ctx.out_dir.join("checkpoint.json");
    variant.checkpoint.save(&ckpt_path)?;
    let hist_path = ctx.out_dir.join("history.json");
    write_json(
        &hist_path,
        &HistoryDoc {
            config_hash: &ctx.config_hash,
            seed: config.seed,
            variant: &variant.key,
            history: &variant.history,
        },
    )?;
    Ok(vec![ckpt_path, hist_path])
}

fn load_checkpoint(ctx: &RunContext) -> Result<Checkpoint> {
    let path = ctx
        .config
        .checkpoint
        .clone()
        .unwrap_or_else(|| ctx.out_dir.join("checkpoint.json"));
    if !path.exists() {
        return Err(AppError::config(
            "checkpoint",
            format!("checkpoint file {} does not exist", path.display()),
        ));
    }
    Checkpoint::load(&path)
}

/// Rebuild panels the way the checkpoint's model expects and verify the
/// scale fingerprint and vocabulary.
fn prepare_for_checkpoint(
    ctx: &RunContext,
    ckpt: &Checkpoint,
) -> Result<(Prepared, bool, ExperimentConfig)> {
    let spec = match &ckpt.model {
        ModelKind::Tft(m) => m.inputs.clone(),
        ModelKind::DeepTcn(m) => m.inputs.clone(),
    };
    let use_viral = spec.unknown_names.iter().any(|n| n == "viral_load");
    let mut config = ctx.config.clone();
    config.model.use_viral = true; // panels built with viral, dropped per variant
    config.model.noise_covariate = spec.unknown_names.iter().any(|n| n == "noise");
    let prepared = prepare(ctx, &config)?;
    ckpt.check_scale_fingerprint(prepared.pipeline.scale_fingerprint())?;
    if ckpt.vocab.ids() != prepared.vocab.ids() {
        return Err(AppError::Other(
            "training-county set differs from the checkpoint's vocabulary".into(),
        ));
    }
    Ok((prepared, use_viral, config))
}

fn run_backtest(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let ckpt = load_checkpoint(ctx)?;
    let (prepared, use_viral, config) = prepare_for_checkpoint(ctx, &ckpt)?;
    let before = ckpt.params.fingerprint();
    let (training, holdout) = backtest_variant(
        &config,
        &ckpt,
        &prepared.train_panels,
        &prepared.holdout_panels,
        use_viral,
    )?;
    debug_assert_eq!(ckpt.params.fingerprint(), before);

    let mut blocks = training.blocks.clone();
    if let Some(h) = &holdout {
        blocks.extend(h.blocks.clone());
    }
    let forecasts_path = ctx.out_dir.join("forecasts.csv");
    write_forecasts_csv(&forecasts_path, &blocks, &ckpt.quantiles, &ctx.provenance())?;

    let mut county_sets = BTreeMap::new();
    county_sets.insert(
        "training".to_string(),
        BTreeMap::from([(ckpt.variant.clone(), variant_metrics(&training))]),
    );
    if let Some(h) = &holdout {
        county_sets.insert(
            "holdout".to_string(),
            BTreeMap::from([(ckpt.variant.clone(), variant_metrics(h))]),
        );
    }
    let metrics_path = ctx.out_dir.join("metrics.json");
    write_json(
        &metrics_path,
        &MetricsDoc {
            config_hash: ctx.config_hash.clone(),
            seed: ctx.config.seed,
            county_sets,
        },
    )?;
    Ok(vec![forecasts_path, metrics_path])
}

fn run_ablate(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let mut config = ctx.config.clone();
    config.model.use_viral = true; // base panels carry the viral series
    let prepared = prepare(ctx, &config)?;
    let mut artifacts = Vec::new();

    let plan = [
        (ModelFamily::Tft, true),
        (ModelFamily::Tft, false),
        (ModelFamily::DeepTcn, true),
        (ModelFamily::DeepTcn, false),
    ];
    let mut results: Vec<(String, BacktestResult, Option<BacktestResult>)> = Vec::new();
    let mut importance: Option<ImportanceReport> = None;
    for (family, use_viral) in plan {
        let variant = train_variant(ctx, &config, family, use_viral, &prepared)?;
        let (training, holdout) = backtest_variant(
            &config,
            &variant.checkpoint,
            &prepared.train_panels,
            &prepared.holdout_panels,
            use_viral,
        )?;

        let ckpt_path = ctx.out_dir.join(format!("checkpoint_{}.json", variant.key));
        variant.checkpoint.save(&ckpt_path)?;
        let hist_path = ctx.out_dir.join(format!("history_{}.json", variant.key));
        write_json(
            &hist_path,
            &HistoryDoc {
                config_hash: &ctx.config_hash,
                seed: config.seed,
                variant: &variant.key,
                history: &variant.history,
            },
        )?;
        let mut blocks = training.blocks.clone();
        if let Some(h) = &holdout {
            blocks.extend(h.blocks.clone());
        }
        let fc_path = ctx.out_dir.join(format!("forecasts_{}.csv", variant.key));
        write_forecasts_csv(&fc_path, &blocks, &config.quantiles, &ctx.provenance())?;
        artifacts.extend([ckpt_path, hist_path, fc_path]);

        if variant.key == "tft" {
            importance = Some(compute_importance(
                &config,
                &variant.checkpoint,
                &prepared.train_panels,
                true,
            )?);
        }
        results.push((variant.key, training, holdout));
    }

    // metrics document across all variants and county sets
    let mut county_sets: BTreeMap<String, BTreeMap<String, VariantMetricsDoc>> = BTreeMap::new();
    for (key, training, holdout) in &results {
        county_sets
            .entry("training".into())
            .or_default()
            .insert(key.clone(), variant_metrics(training));
        if let Some(h) = holdout {
            county_sets
                .entry("holdout".into())
                .or_default()
                .insert(key.clone(), variant_metrics(h));
        }
    }
    let metrics_path = ctx.out_dir.join("metrics.json");
    write_json(
        &metrics_path,
        &MetricsDoc {
            config_hash: ctx.config_hash.clone(),
            seed: ctx.config.seed,
            county_sets,
        },
    )?;
    artifacts.push(metrics_path);

    // Table-shaped text report
    let training_refs: Vec<(&str, &BacktestResult)> = results
        .iter()
        .map(|(k, t, _)| (k.as_str(), t))
        .collect();
    let mut tables: Vec<AblationTable> = vec![ablation_table("Training", &training_refs)?];
    if results.iter().all(|(_, _, h)| h.is_some()) {
        let holdout_refs: Vec<(&str, &BacktestResult)> = results
            .iter()
            .map(|(k, _, h)| (k.as_str(), h.as_ref().expect("checked")))
            .collect();
        tables.push(ablation_table("Holdout", &holdout_refs)?);
    }
    let table_path = ctx.out_dir.join("ablation.txt");
    std::fs::write(&table_path, render_ablation_text(&tables))
        .map_err(|e| AppError::io(&table_path, e))?;
    artifacts.push(table_path);

    if let Some(report) = importance {
        let imp_path = ctx.out_dir.join("importance.json");
        write_json(&imp_path, &importance_doc(ctx, &report))?;
        let svg_path = ctx.out_dir.join("importance.svg");
        std::fs::write(&svg_path, importance_svg(&report))
            .map_err(|e| AppError::io(&svg_path, e))?;
        artifacts.extend([imp_path, svg_path]);
    }
    Ok(artifacts)
}

fn run_explain(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let ckpt = load_checkpoint(ctx)?;
    let (prepared, use_viral, config) = prepare_for_checkpoint(ctx, &ckpt)?;
    let report = compute_importance(&config, &ckpt, &prepared.train_panels, use_viral)?;
    let imp_path = ctx.out_dir.join("importance.json");
    write_json(&imp_path, &importance_doc(ctx, &report))?;
    let svg_path = ctx.out_dir.join("importance.svg");
    std::fs::write(&svg_path, importance_svg(&report)).map_err(|e| AppError::io(&svg_path, e))?;
    Ok(vec![imp_path, svg_path])
}

fn run_synth(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let Some(synth_cfg) = &ctx.config.synth else {
        return Err(AppError::config("synth", "synth subcommand needs a synth section"));
    };
    let mut synth_cfg = synth_cfg.clone();
    synth_cfg.seed = ctx.config.seed;
    let output = generate(&synth_cfg)?;
    let start_day = parse_day(&ctx.config.synth_start_date)?;
    let paths = write_synth_csvs(&ctx.out_dir, &output, start_day, &ctx.provenance())?;
    let truth_path = ctx.out_dir.join("truth.json");
    write_json(
        &truth_path,
        &serde_json::json!({
            "config_hash": ctx.config_hash,
            "seed": ctx.config.seed,
            "synth": output.config,
            "configured_lag_days": output.config.reporting_delay,
            "counties": output.counties.iter().map(|c| serde_json::json!({
                "county_id": c.county_id,
                "region_id": c.region_id,
                "incidence": c.incidence,
            })).collect::<Vec<_>>(),
        }),
    )?;
    Ok(vec![
        paths.cases,
        paths.viral,
        paths.oxford,
        paths.county_map,
        truth_path,
    ])
}

fn run_plot(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let forecasts_path = ctx.out_dir.join("forecasts.csv");
    if !forecasts_path.exists() {
        return Err(AppError::Other(format!(
            "{} not found; run backtest first",
            forecasts_path.display()
        )));
    }
    let rows = load_forecasts_csv(&forecasts_path)?;
    let mut counties: Vec<String> = rows.iter().map(|r| r.county.clone()).collect();
    counties.sort();
    counties.dedup();
    let dir = ctx.out_dir.join("plots");
    std::fs::create_dir_all(&dir).map_err(|e| AppError::io(&dir, e))?;
    let mut artifacts = Vec::new();
    for county in counties {
        let svg = forecast_svg(&county, &rows);
        let path = dir.join(format!("{county}.svg"));
        std::fs::write(&path, svg).map_err(|e| AppError::io(&path, e))?;
        artifacts.push(path);
    }
    Ok(artifacts)
}

/// Used by tests and the explain path: panels -> prepared state without
/// re-reading the config from disk.
pub fn prepare_for_tests(ctx: &RunContext) -> Result<(Vec<CountyPanel>, Vec<CountyPanel>, CountyVocab)> {
    let p = prepare(ctx, &ctx.config)?;
    Ok((p.train_panels, p.holdout_panels, p.vocab))
}
