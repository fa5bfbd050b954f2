//! Sliding-window extraction: panels become a single global training set of
//! fixed-geometry samples across all counties.

use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::panel::{CountyPanel, Region};

/// One training or inference instance. `origin` is the first forecast index
/// into the source panel: the past slices cover `[origin - lookback, origin)`
/// and the future slice covers `[origin, origin + horizon)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowSample {
    pub county_id: String,
    /// Index into the training-county vocabulary; `None` for counties never
    /// seen in training (the holdout path).
    pub county_index: Option<usize>,
    pub origin: usize,
    /// Scaled target history, `lookback` long.
    pub past_target: Vec<f64>,
    /// Past-only covariates, each `lookback` long.
    pub past_unknown: Vec<Vec<f64>>,
    /// Known covariates spanning past and horizon, each `lookback + horizon`.
    pub known: Vec<Vec<f64>>,
    /// Scaled future target, `horizon` long (training / evaluation only).
    pub future_target: Option<Vec<f64>>,
}

/// Vocabulary of training counties; index order is panel order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CountyVocab {
    ids: Vec<String>,
}

impl CountyVocab {
    pub fn from_panels(panels: &[CountyPanel]) -> Self {
        CountyVocab {
            ids: panels.iter().map(|p| p.county_id.clone()).collect(),
        }
    }

    pub fn index_of(&self, county_id: &str) -> Option<usize> {
        self.ids.iter().position(|c| c == county_id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// All samples across counties, plus the shared geometry.
#[derive(Debug, Clone)]
pub struct GlobalDataset {
    pub samples: Vec<WindowSample>,
    pub lookback: usize,
    pub horizon: usize,
    pub n_unknown: usize,
    pub n_known: usize,
}

/// The input geometry a model is built against: window sizes plus the named
/// covariates in panel order. Checkpoints echo it so inference inputs can be
/// checked against the training layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub lookback: usize,
    pub horizon: usize,
    pub unknown_names: Vec<String>,
    pub known_names: Vec<String>,
}

impl InputSpec {
    pub fn from_panels(panels: &[CountyPanel], lookback: usize, horizon: usize) -> Result<Self> {
        let first = panels.first().ok_or_else(|| CoreError::InvalidArgument {
            what: "input spec from an empty panel set".into(),
        })?;
        Ok(InputSpec {
            lookback,
            horizon,
            unknown_names: first.unknown.iter().map(|s| s.name.clone()).collect(),
            known_names: first.known.iter().map(|s| s.name.clone()).collect(),
        })
    }

    pub fn n_unknown(&self) -> usize {
        self.unknown_names.len()
    }

    pub fn n_known(&self) -> usize {
        self.known_names.len()
    }
}

/// Closed-form window count for a self-contained region of length `len`.
pub fn window_count(len: usize, lookback: usize, horizon: usize, stride: usize) -> usize {
    if len < lookback + horizon {
        0
    } else {
        (len - lookback - horizon) / stride + 1
    }
}

/// Enumerate forecast origins for a region. Training windows live entirely
/// inside the region; validation/test windows keep their future slice in
/// the region but may reach back into earlier history for the look-back,
/// exactly like a real forecast made at that date.
fn origins_for_region(
    region_range: core::ops::Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
    self_contained: bool,
) -> Vec<usize> {
    let first = if self_contained {
        region_range.start + lookback
    } else {
        region_range.start.max(lookback)
    };
    let mut origins = Vec::new();
    let mut t = first;
    while t + horizon <= region_range.end {
        origins.push(t);
        t += stride;
    }
    origins
}

/// Cut windows for one region across all panels. The vocabulary decides the
/// static county index; counties outside it get `None` (holdout path).
pub fn make_windows(
    panels: &[CountyPanel],
    vocab: &CountyVocab,
    region: Region,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<GlobalDataset> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(CoreError::InvalidArgument {
            what: alloc::format!(
                "window geometry must be positive: lookback={lookback} horizon={horizon} stride={stride}"
            ),
        });
    }
    let mut samples = Vec::new();
    let mut n_unknown = None;
    let mut n_known = None;
    for panel in panels {
        panel.validate()?;
        let nu = panel.unknown.len();
        let nk = panel.known.len();
        if *n_unknown.get_or_insert(nu) != nu || *n_known.get_or_insert(nk) != nk {
            return Err(CoreError::InvalidArgument {
                what: alloc::format!("county {}: covariate sets differ across panels", panel.county_id),
            });
        }
        let self_contained = region == Region::Train;
        let range = panel.split.range(region);
        for origin in origins_for_region(range, lookback, horizon, stride, self_contained) {
            samples.push(cut_window(panel, vocab, origin, lookback, horizon)?);
        }
    }
    Ok(GlobalDataset {
        samples,
        lookback,
        horizon,
        n_unknown: n_unknown.unwrap_or(0),
        n_known: n_known.unwrap_or(0),
    })
}

/// Cut one window at a forecast origin; exposed for the backtest harness.
pub fn cut_window(
    panel: &CountyPanel,
    vocab: &CountyVocab,
    origin: usize,
    lookback: usize,
    horizon: usize,
) -> Result<WindowSample> {
    if origin < lookback || origin + horizon > panel.len() {
        return Err(CoreError::InvalidArgument {
            what: alloc::format!(
                "county {}: window at origin {} outside panel of length {} (lookback {}, horizon {})",
                panel.county_id,
                origin,
                panel.len(),
                lookback,
                horizon
            ),
        });
    }
    let past = origin - lookback..origin;
    let future = origin..origin + horizon;
    let span = origin - lookback..origin + horizon;
    Ok(WindowSample {
        county_id: panel.county_id.clone(),
        county_index: vocab.index_of(&panel.county_id),
        origin,
        past_target: panel.target_scaled[past.clone()].to_vec(),
        past_unknown: panel
            .unknown
            .iter()
            .map(|s| s.values[past.clone()].to_vec())
            .collect(),
        known: panel
            .known
            .iter()
            .map(|s| s.values[span.clone()].to_vec())
            .collect(),
        future_target: Some(panel.target_scaled[future].to_vec()),
    })
}

/// Deterministically shuffled index batches covering every sample exactly
/// once. The same seed reproduces the same order.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(CoreError::InvalidArgument {
            what: "batching an empty dataset".into(),
        });
    }
    if batch_size == 0 {
        return Err(CoreError::InvalidArgument {
            what: "batch size must be >= 1".into(),
        });
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = crate::Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}
