//! Training-loop behavior: convergence on a constant series, early-stop
//! accounting, best-checkpoint contract, and bit-level determinism.

use epicast_core::deeptcn::{DeepTcn, DeepTcnConfig};
use epicast_core::params::ParamStore;
use epicast_core::train::{evaluate_loss, train, TrainConfig};
use epicast_core::window::{GlobalDataset, InputSpec, WindowSample};
use epicast_core::{rng_from_seed, Rng};
use rand::Rng as _;

fn constant_dataset(n: usize, lookback: usize, horizon: usize, level: f64) -> GlobalDataset {
    let samples = (0..n)
        .map(|i| WindowSample {
            county_id: format!("c{}", i % 3),
            county_index: Some(i % 3),
            origin: lookback,
            past_target: vec![level; lookback],
            past_unknown: vec![vec![level; lookback]],
            known: vec![vec![0.3; lookback + horizon], vec![0.7; lookback + horizon]],
            future_target: Some(vec![level; horizon]),
        })
        .collect();
    GlobalDataset {
        samples,
        lookback,
        horizon,
        n_unknown: 1,
        n_known: 2,
    }
}

fn noisy_dataset(n: usize, lookback: usize, horizon: usize, rng: &mut Rng) -> GlobalDataset {
    let samples = (0..n)
        .map(|i| WindowSample {
            county_id: format!("c{}", i % 3),
            county_index: Some(i % 3),
            origin: lookback,
            past_target: (0..lookback).map(|_| rng.random::<f64>()).collect(),
            past_unknown: vec![(0..lookback).map(|_| rng.random::<f64>()).collect()],
            known: (0..2)
                .map(|_| (0..lookback + horizon).map(|_| rng.random::<f64>()).collect())
                .collect(),
            future_target: Some((0..horizon).map(|_| rng.random::<f64>()).collect()),
        })
        .collect();
    GlobalDataset {
        samples,
        lookback,
        horizon,
        n_unknown: 1,
        n_known: 2,
    }
}

fn small_model(seed: u64) -> (ParamStore, DeepTcn) {
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(seed);
    let model = DeepTcn::new(
        &mut store,
        DeepTcnConfig {
            kernel_size: 2,
            dilations: vec![1, 2, 4],
            channels: 4,
            decoder_hidden: 8,
            position_embed_width: 2,
            quantiles: vec![0.05, 0.5, 0.95],
        },
        InputSpec {
            lookback: 8,
            horizon: 3,
            unknown_names: vec!["viral_load".into()],
            known_names: vec!["k0".into(), "k1".into()],
        },
        &mut rng,
    )
    .unwrap();
    (store, model)
}

#[test]
fn constant_series_converges_fast() {
    let (mut store, model) = small_model(1);
    let train_ds = constant_dataset(32, 8, 3, 0.5);
    let val_ds = constant_dataset(8, 8, 3, 0.5);
    let cfg = TrainConfig {
        learning_rate: 1.5e-3,
        batch_size: 2,
        max_epochs: 50,
        patience: 49,
        grad_clip_norm: 1.0,
        seed: 7,
    };
    let history = train(&model, &mut store, &train_ds, &val_ds, &cfg).unwrap();
    let min_train = history.train_loss.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(
        min_train < 1e-3,
        "expected training loss below 1e-3 within 50 epochs, got {min_train}"
    );
}

#[test]
fn frozen_learning_stops_exactly_patience_plus_one_past_best() {
    // zero learning rate keeps validation loss constant: the first epoch is
    // the best, and with patience 2 training halts 3 epochs later
    let (mut store, model) = small_model(2);
    let mut rng = rng_from_seed(5);
    let train_ds = noisy_dataset(24, 8, 3, &mut rng);
    let val_ds = noisy_dataset(8, 8, 3, &mut rng);
    let cfg = TrainConfig {
        learning_rate: 1e-12,
        batch_size: 12,
        max_epochs: 40,
        patience: 2,
        grad_clip_norm: 1.0,
        seed: 3,
    };
    let history = train(&model, &mut store, &train_ds, &val_ds, &cfg).unwrap();
    assert_eq!(history.best_epoch, 0);
    assert_eq!(history.stopped_epoch, 3);
    assert_eq!(history.validation_loss.len(), 4);
}

#[test]
fn returned_parameters_reproduce_the_best_validation_loss() {
    let (mut store, model) = small_model(3);
    let mut rng = rng_from_seed(9);
    let train_ds = noisy_dataset(32, 8, 3, &mut rng);
    let val_ds = noisy_dataset(12, 8, 3, &mut rng);
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 16,
        max_epochs: 15,
        patience: 14,
        grad_clip_norm: 1.0,
        seed: 11,
    };
    let history = train(&model, &mut store, &train_ds, &val_ds, &cfg).unwrap();
    let min = history
        .validation_loss
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    assert_eq!(history.best_validation_loss(), min);
    // the store now holds the best epoch's parameters
    let replayed = evaluate_loss(&model, &store, &val_ds, cfg.batch_size).unwrap();
    assert_eq!(replayed, min);
}

#[test]
fn training_is_bit_deterministic() {
    let run = || {
        let (mut store, model) = small_model(4);
        let mut rng = rng_from_seed(13);
        let train_ds = noisy_dataset(24, 8, 3, &mut rng);
        let val_ds = noisy_dataset(8, 8, 3, &mut rng);
        let cfg = TrainConfig {
            learning_rate: 2e-3,
            batch_size: 12,
            max_epochs: 6,
            patience: 5,
            grad_clip_norm: 1.0,
            seed: 17,
        };
        let history = train(&model, &mut store, &train_ds, &val_ds, &cfg).unwrap();
        (store.fingerprint(), history.train_loss, history.validation_loss)
    };
    let (fp1, tl1, vl1) = run();
    let (fp2, tl2, vl2) = run();
    assert_eq!(fp1, fp2);
    assert_eq!(tl1, tl2);
    assert_eq!(vl1, vl2);
}

#[test]
fn empty_dataset_is_rejected() {
    let (mut store, model) = small_model(5);
    let empty = GlobalDataset {
        samples: vec![],
        lookback: 8,
        horizon: 3,
        n_unknown: 1,
        n_known: 2,
    };
    let mut rng = rng_from_seed(1);
    let ds = noisy_dataset(8, 8, 3, &mut rng);
    assert!(train(&model, &mut store, &empty, &ds, &TrainConfig::default()).is_err());
    assert!(train(&model, &mut store, &ds, &empty, &TrainConfig::default()).is_err());
}
