//! Aligned per-county panels and the pure series transforms that build
//! them: differencing + smoothing of cumulative counts, weekly-to-daily
//! interpolation, min-max scaling, and chronological splitting.
//!
//! Dates are carried as epoch-day integers; calendar parsing/formatting and
//! CSV ingestion live in the companion crate.

// float math via the trait: test builds link std, the lib build must not
#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Days of trailing smoothing applied to daily differences.
pub const SMOOTH_WINDOW: usize = 7;

/// Min-max parameters fit on a declared region; the inverse transform is
/// exact. A degenerate range (max == min) maps everything to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub min: f64,
    pub max: f64,
}

impl ScaleParams {
    /// Fit on a nonempty slice (the training region, by convention).
    pub fn fit(region: &[f64]) -> Result<Self> {
        if region.is_empty() {
            return Err(CoreError::InvalidArgument {
                what: "min-max fit on an empty region".into(),
            });
        }
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &v in region {
            min = min.min(v);
            max = max.max(v);
        }
        Ok(ScaleParams { min, max })
    }

    pub fn is_degenerate(&self) -> bool {
        self.max == self.min
    }

    pub fn transform(&self, x: f64) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            (x - self.min) / (self.max - self.min)
        }
    }

    pub fn inverse(&self, y: f64) -> f64 {
        if self.is_degenerate() {
            self.min
        } else {
            self.min + y * (self.max - self.min)
        }
    }

    pub fn transform_all(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.transform(x)).collect()
    }
}

/// One named, scaled covariate series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedSeries {
    pub name: String,
    pub values: Vec<f64>,
}

/// Chronological split fractions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    /// Fraction of the panel used for training + validation (default 0.8).
    pub train_fraction: f64,
    /// Fraction of the training block held out for validation (default 0.1).
    pub validation_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            validation_fraction: 0.1,
        }
    }
}

/// Index boundaries of the train / validation / test regions:
/// `[0, train_end)`, `[train_end, validation_end)`, `[validation_end, len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train_end: usize,
    pub validation_end: usize,
    pub len: usize,
}

/// Which split region an operation addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Train,
    Validation,
    Test,
}

impl SplitBounds {
    pub fn range(&self, region: Region) -> core::ops::Range<usize> {
        match region {
            Region::Train => 0..self.train_end,
            Region::Validation => self.train_end..self.validation_end,
            Region::Test => self.validation_end..self.len,
        }
    }
}

/// Aligned daily series for one county, all the same length, with the
/// scaling parameters fit on the training region and the split boundaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountyPanel {
    pub county_id: String,
    /// Epoch day of the first aligned observation.
    pub start_day: i64,
    /// Smoothed daily cases per 100k, original units.
    pub target: Vec<f64>,
    /// Target scaled to the training region's [0, 1].
    pub target_scaled: Vec<f64>,
    /// Past-only covariates (viral load, optional injected noise), scaled.
    pub unknown: Vec<NamedSeries>,
    /// Known-future covariates (policy indices, calendar), scaled.
    pub known: Vec<NamedSeries>,
    pub target_scale: ScaleParams,
    pub split: SplitBounds,
}

impl CountyPanel {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    /// Alignment invariant: every series has the panel's length.
    pub fn validate(&self) -> Result<()> {
        let n = self.target.len();
        if self.target_scaled.len() != n {
            return Err(CoreError::InvalidArgument {
                what: format!("{}: scaled target length mismatch", self.county_id),
            });
        }
        for s in self.unknown.iter().chain(self.known.iter()) {
            if s.values.len() != n {
                return Err(CoreError::InvalidArgument {
                    what: format!(
                        "{}: series `{}` has {} points, expected {}",
                        self.county_id,
                        s.name,
                        s.values.len(),
                        n
                    ),
                });
            }
        }
        if self.split.len != n {
            return Err(CoreError::InvalidArgument {
                what: format!("{}: split bounds disagree with panel length", self.county_id),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// series transforms
// ---------------------------------------------------------------------------

/// First-difference a cumulative series, clamp reporting corrections
/// (negative diffs) to zero, then apply a trailing 7-day mean. The output
/// is `input length - 7` points and aligns to the input dates offset by 7:
/// output[i] describes input date `i + 7`.
pub fn diff_and_smooth(cumulative: &[f64]) -> Result<Vec<f64>> {
    if cumulative.len() < SMOOTH_WINDOW + 1 {
        return Err(CoreError::SeriesTooShort {
            context: "diff_and_smooth".into(),
            needed: SMOOTH_WINDOW + 1,
            got: cumulative.len(),
        });
    }
    let diffs: Vec<f64> = cumulative
        .windows(2)
        .map(|w| (w[1] - w[0]).max(0.0))
        .collect();
    let mut out = Vec::with_capacity(diffs.len() - (SMOOTH_WINDOW - 1));
    let mut window_sum: f64 = diffs[..SMOOTH_WINDOW].iter().sum();
    out.push(window_sum / SMOOTH_WINDOW as f64);
    for i in SMOOTH_WINDOW..diffs.len() {
        window_sum += diffs[i] - diffs[i - SMOOTH_WINDOW];
        out.push(window_sum / SMOOTH_WINDOW as f64);
    }
    Ok(out)
}

/// Linear interpolation of sparse samples onto a contiguous daily axis.
/// Samples must be sorted by day; duplicates on one day are averaged. No
/// extrapolation: the returned axis covers exactly
/// `[first sample day, last sample day]`.
pub fn interpolate_to_daily(samples: &[(i64, f64)]) -> Result<(i64, Vec<f64>)> {
    if samples.len() < 2 {
        return Err(CoreError::SeriesTooShort {
            context: "interpolate_to_daily".into(),
            needed: 2,
            got: samples.len(),
        });
    }
    if samples.windows(2).any(|w| w[0].0 > w[1].0) {
        return Err(CoreError::InvalidArgument {
            what: "interpolation samples must be sorted by date".into(),
        });
    }
    // average duplicate days
    let mut merged: Vec<(i64, f64)> = Vec::with_capacity(samples.len());
    for &(day, v) in samples {
        match merged.last_mut() {
            Some((d, _)) if *d == day => {}
            _ => {
                merged.push((day, 0.0));
            }
        }
        let last = merged.last_mut().expect("just pushed");
        let count = samples.iter().filter(|(d, _)| *d == day).count() as f64;
        last.1 += v / count;
    }
    if merged.len() < 2 {
        return Err(CoreError::SeriesTooShort {
            context: "interpolate_to_daily (after duplicate merge)".into(),
            needed: 2,
            got: merged.len(),
        });
    }
    let start = merged[0].0;
    let end = merged[merged.len() - 1].0;
    let mut out = Vec::with_capacity((end - start + 1) as usize);
    let mut seg = 0;
    for day in start..=end {
        while merged[seg + 1].0 < day {
            seg += 1;
        }
        let (d0, v0) = merged[seg];
        let (d1, v1) = merged[seg + 1];
        let v = if day == d0 {
            v0
        } else if day == d1 {
            v1
        } else {
            v0 + (v1 - v0) * (day - d0) as f64 / (d1 - d0) as f64
        };
        out.push(v);
    }
    Ok((start, out))
}

/// Region lengths: train = floor(0.9 * 0.8 * L), validation = the rest of
/// the 0.8 block, test = the remainder. A small epsilon rescues exact
/// products from floating-point floor artifacts.
pub fn split_chronological(len: usize, spec: &SplitSpec) -> Result<SplitBounds> {
    if !(0.0..1.0).contains(&spec.train_fraction)
        || !(0.0..1.0).contains(&spec.validation_fraction)
        || spec.train_fraction == 0.0
    {
        return Err(CoreError::InvalidConfig {
            what: format!(
                "split fractions train={} validation={} outside (0,1)",
                spec.train_fraction, spec.validation_fraction
            ),
        });
    }
    let f_train_block = spec.train_fraction;
    let f_train = f_train_block * (1.0 - spec.validation_fraction);
    let train_end = (f_train * len as f64 + 1e-9).floor() as usize;
    let validation_end = (f_train_block * len as f64 + 1e-9).floor() as usize;
    if train_end == 0 || validation_end >= len {
        return Err(CoreError::SeriesTooShort {
            context: "split_chronological".into(),
            needed: 3,
            got: len,
        });
    }
    Ok(SplitBounds {
        train_end,
        validation_end,
        len,
    })
}

/// Check that every region can serve its role for the given window geometry:
/// the training region must hold at least one full (lookback + horizon)
/// window, validation and test at least one horizon.
pub fn check_split_for_windows(
    county_id: &str,
    bounds: &SplitBounds,
    lookback: usize,
    horizon: usize,
) -> Result<()> {
    let train_len = bounds.train_end;
    let val_len = bounds.validation_end - bounds.train_end;
    let test_len = bounds.len - bounds.validation_end;
    if train_len < lookback + horizon {
        return Err(CoreError::SeriesTooShort {
            context: format!("county {county_id} training region"),
            needed: lookback + horizon,
            got: train_len,
        });
    }
    if val_len < horizon {
        return Err(CoreError::SeriesTooShort {
            context: format!("county {county_id} validation region"),
            needed: horizon,
            got: val_len,
        });
    }
    if test_len < horizon {
        return Err(CoreError::SeriesTooShort {
            context: format!("county {county_id} test region"),
            needed: horizon,
            got: test_len,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn diff_clamps_reporting_corrections() {
        // cumulative drop (correction) must not go negative
        let series = [10.0, 8.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0];
        let out = diff_and_smooth(&series).unwrap();
        assert_eq!(out.len(), 1);
        // diffs: [0 (clamped), 1, 0, 0, 0, 0, 0] -> mean 1/7
        assert!((out[0] - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn diff_of_linear_cumulative_is_constant() {
        let series: Vec<f64> = (0..15).map(|i| 100.0 + 3.0 * i as f64).collect();
        let out = diff_and_smooth(&series).unwrap();
        assert_eq!(out.len(), 15 - 7);
        assert!(out.iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn diff_rejects_short_series() {
        let err = diff_and_smooth(&[1.0; 7]).unwrap_err();
        assert!(matches!(err, CoreError::SeriesTooShort { .. }));
    }

    #[test]
    fn first_differences_match_hand_values() {
        // cumulative [100, 110, 125] -> daily diffs [10, 15]
        let series = [100.0, 110.0, 125.0];
        let diffs: Vec<f64> = series.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect();
        assert_eq!(diffs, vec![10.0, 15.0]);
    }

    #[test]
    fn interpolation_is_linear_and_trimmed() {
        let samples = [(0i64, 0.0), (7, 7.0)];
        let (start, out) = interpolate_to_daily(&samples).unwrap();
        assert_eq!(start, 0);
        assert_eq!(out.len(), 8); // exactly days 0..=7
        assert!((out[3] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn interpolation_passes_through_samples() {
        let samples = [(10i64, 2.0), (17, 9.0), (24, 1.0)];
        let (start, out) = interpolate_to_daily(&samples).unwrap();
        assert_eq!(start, 10);
        assert_eq!(out[0], 2.0);
        assert_eq!(out[7], 9.0);
        assert_eq!(out[14], 1.0);
    }

    #[test]
    fn interpolation_averages_duplicate_days() {
        let samples = [(0i64, 1.0), (0, 3.0), (2, 4.0)];
        let (_, out) = interpolate_to_daily(&samples).unwrap();
        assert!((out[0] - 2.0).abs() < 1e-12);
        assert!((out[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn interpolation_needs_two_samples() {
        assert!(interpolate_to_daily(&[(3, 1.0)]).is_err());
    }

    #[test]
    fn minmax_definition_and_roundtrip() {
        let p = ScaleParams::fit(&[5.0, 10.0, 15.0]).unwrap();
        let scaled: Vec<f64> = [5.0, 10.0, 15.0].iter().map(|&x| p.transform(x)).collect();
        assert_eq!(scaled, vec![0.0, 0.5, 1.0]);
        for &x in &[5.0, 7.3, 12.9, 15.0, 20.0] {
            assert!((p.inverse(p.transform(x)) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn minmax_degenerate_maps_to_zero() {
        let p = ScaleParams::fit(&[4.0, 4.0, 4.0]).unwrap();
        assert_eq!(p.transform(4.0), 0.0);
        assert_eq!(p.inverse(0.0), 4.0);
    }

    #[test]
    fn split_80_10_arithmetic() {
        let b = split_chronological(100, &SplitSpec::default()).unwrap();
        assert_eq!(b.train_end, 72);
        assert_eq!(b.validation_end, 80);
        assert_eq!(b.len, 100);
        assert_eq!(b.range(Region::Test), 80..100);
    }

    #[test]
    fn split_regions_are_contiguous_and_exhaustive() {
        for len in [37usize, 50, 99, 100, 101, 250] {
            let b = split_chronological(len, &SplitSpec::default()).unwrap();
            assert!(b.train_end < b.validation_end);
            assert!(b.validation_end < b.len);
            let total = b.range(Region::Train).len()
                + b.range(Region::Validation).len()
                + b.range(Region::Test).len();
            assert_eq!(total, len);
        }
    }

    #[test]
    fn short_panel_fails_window_check() {
        // L=45 with lookback 30, horizon 10: test region too short
        let b = split_chronological(45, &SplitSpec::default()).unwrap();
        let err = check_split_for_windows("c1", &b, 30, 10).unwrap_err();
        assert!(matches!(err, CoreError::SeriesTooShort { .. }));
    }
}
