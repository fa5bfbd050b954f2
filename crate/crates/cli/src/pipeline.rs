//! Raw records to aligned county panels: differencing + smoothing,
//! weekly-to-daily interpolation, axis intersection, scaling fit on the
//! training region, calendar covariates, and the chronological split.

use std::collections::{BTreeMap, BTreeSet};

use epicast_core::panel::{
    check_split_for_windows, diff_and_smooth, interpolate_to_daily, split_chronological,
    CountyPanel, NamedSeries, ScaleParams, SplitSpec, SMOOTH_WINDOW,
};
use epicast_core::tensor::fnv1a_f64;
use epicast_core::window::CountyVocab;
use rand::Rng as _;

use crate::config::ExperimentConfig;
use crate::dates::{format_day, parse_day};
use crate::error::{AppError, Result};
use crate::rawio::{RawRecords, OXFORD_NAMES};

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// All panels (training and holdout), sorted by county id.
    pub panels: Vec<CountyPanel>,
    /// Counties dropped with the reason (e.g. too few wastewater samples).
    pub excluded: Vec<(String, String)>,
}

impl PipelineOutput {
    /// Split into (training, holdout) panel sets by the config's holdout list.
    pub fn partition(&self, holdout: &[String]) -> (Vec<CountyPanel>, Vec<CountyPanel>) {
        let holdout: BTreeSet<&String> = holdout.iter().collect();
        let mut train = Vec::new();
        let mut hold = Vec::new();
        for p in &self.panels {
            if holdout.contains(&p.county_id) {
                hold.push(p.clone());
            } else {
                train.push(p.clone());
            }
        }
        (train, hold)
    }

    /// Order-insensitive fingerprint of every panel's scale parameters;
    /// checkpoints carry it so inference data must match training data.
    pub fn scale_fingerprint(&self) -> u64 {
        let mut values = Vec::new();
        for p in &self.panels {
            values.push(p.target_scale.min);
            values.push(p.target_scale.max);
        }
        fnv1a_f64(&values)
    }
}

/// Drop one past-only covariate from every panel (the viral-load ablation);
/// split boundaries and every other series stay bit-identical.
pub fn drop_unknown(panels: &[CountyPanel], name: &str) -> Vec<CountyPanel> {
    panels
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.unknown.retain(|s| s.name != name);
            p
        })
        .collect()
}

struct CountySeries {
    days: Vec<i64>,
    values: Vec<f64>,
}

fn contiguous_daily(
    county: &str,
    what: &str,
    mut rows: Vec<(i64, f64)>,
) -> Result<CountySeries> {
    rows.sort_by_key(|(d, _)| *d);
    for w in rows.windows(2) {
        if w[1].0 == w[0].0 {
            return Err(AppError::Other(format!(
                "county {county}: duplicate {what} date {}",
                format_day(w[0].0)
            )));
        }
        if w[1].0 != w[0].0 + 1 {
            return Err(AppError::Other(format!(
                "county {county}: {what} gap between {} and {}",
                format_day(w[0].0),
                format_day(w[1].0)
            )));
        }
    }
    Ok(CountySeries {
        days: rows.iter().map(|(d, _)| *d).collect(),
        values: rows.iter().map(|(_, v)| *v).collect(),
    })
}

/// Build aligned panels for every county present (optionally filtered),
/// excluding counties that cannot support interpolation.
pub fn build_panels(raw: &RawRecords, config: &ExperimentConfig) -> Result<PipelineOutput> {
    let lookback = config.window.lookback;
    let horizon = config.window.horizon;
    let split_spec: SplitSpec = config.split;

    let mut trim_days: BTreeMap<&String, i64> = BTreeMap::new();
    for (county, date) in &config.trim_dates {
        trim_days.insert(county, parse_day(date)?);
    }

    // group rows per county / region
    let mut cases_by_county: BTreeMap<&String, Vec<(i64, f64)>> = BTreeMap::new();
    for row in &raw.cases {
        cases_by_county
            .entry(&row.county)
            .or_default()
            .push((row.day, row.cumulative));
    }
    let mut viral_by_county: BTreeMap<&String, Vec<(i64, f64)>> = BTreeMap::new();
    for row in &raw.viral {
        viral_by_county
            .entry(&row.county)
            .or_default()
            .push((row.day, row.concentration));
    }
    let mut oxford_by_region: BTreeMap<&String, Vec<(i64, [f64; 4])>> = BTreeMap::new();
    for row in &raw.oxford {
        oxford_by_region
            .entry(&row.region)
            .or_default()
            .push((row.day, row.values));
    }

    let selected: BTreeSet<String> = match &config.counties {
        Some(filter) => filter
            .iter()
            .chain(config.holdout_counties.iter())
            .cloned()
            .collect(),
        None => cases_by_county.keys().map(|c| (*c).clone()).collect(),
    };

    let mut panels = Vec::new();
    let mut excluded = Vec::new();
    for county in &selected {
        let Some(case_rows) = cases_by_county.get(county) else {
            return Err(AppError::Other(format!(
                "county {county}: no case rows in the input"
            )));
        };
        let mut case_rows = case_rows.clone();
        if let Some(&cutoff) = trim_days.get(county) {
            case_rows.retain(|(d, _)| *d <= cutoff);
        }
        let cases = contiguous_daily(county, "case", case_rows)?;
        if cases.values.len() < SMOOTH_WINDOW + 1 {
            excluded.push((
                county.clone(),
                format!("only {} case days after trimming", cases.values.len()),
            ));
            continue;
        }
        let smoothed = diff_and_smooth(&cases.values)?;
        let smoothed_start = cases.days[0] + SMOOTH_WINDOW as i64;

        let mut viral_rows = viral_by_county.get(county).cloned().unwrap_or_default();
        if let Some(&cutoff) = trim_days.get(county) {
            viral_rows.retain(|(d, _)| *d <= cutoff);
        }
        viral_rows.sort_by_key(|(d, _)| *d);
        if viral_rows.len() < 2 {
            excluded.push((
                county.clone(),
                format!("{} wastewater samples; interpolation needs 2", viral_rows.len()),
            ));
            continue;
        }
        let (viral_start, viral_daily) = interpolate_to_daily(&viral_rows)?;

        let Some(region) = raw.county_map.get(county) else {
            return Err(AppError::Other(format!(
                "county {county}: missing from the county-to-region map"
            )));
        };
        let Some(oxford_rows) = oxford_by_region.get(region) else {
            return Err(AppError::Other(format!(
                "county {county}: no policy rows for region {region}"
            )));
        };
        let oxford_flat: Vec<(i64, f64)> =
            oxford_rows.iter().map(|(d, v)| (*d, v[0])).collect();
        let oxford_axis = contiguous_daily(county, "policy", oxford_flat)?;
        let mut oxford_sorted = oxford_rows.clone();
        oxford_sorted.sort_by_key(|(d, _)| *d);

        // aligned axis: intersection of the three coverages
        let start = smoothed_start
            .max(viral_start)
            .max(oxford_axis.days[0]);
        let end = (smoothed_start + smoothed.len() as i64)
            .min(viral_start + viral_daily.len() as i64)
            .min(oxford_axis.days[0] + oxford_axis.days.len() as i64);
        if end <= start {
            return Err(AppError::Other(format!(
                "county {county}: case, wastewater, and policy coverages do not overlap"
            )));
        }
        let len = (end - start) as usize;
        let slice = |series_start: i64, series: &[f64]| -> Vec<f64> {
            let offset = (start - series_start) as usize;
            series[offset..offset + len].to_vec()
        };

        let target = slice(smoothed_start, &smoothed);
        let viral = slice(viral_start, &viral_daily);
        let oxford_series: Vec<Vec<f64>> = (0..4)
            .map(|j| {
                let vals: Vec<f64> = oxford_sorted.iter().map(|(_, v)| v[j]).collect();
                slice(oxford_axis.days[0], &vals)
            })
            .collect();

        let bounds = split_chronological(len, &split_spec)?;
        check_split_for_windows(county, &bounds, lookback, horizon)?;
        let train_range = 0..bounds.train_end;

        let target_scale = ScaleParams::fit(&target[train_range.clone()])?;
        let target_scaled = target_scale.transform_all(&target);

        let mut unknown = Vec::new();
        if config.model.use_viral {
            let scale = ScaleParams::fit(&viral[train_range.clone()])?;
            unknown.push(NamedSeries {
                name: "viral_load".into(),
                values: scale.transform_all(&viral),
            });
        }
        if config.model.noise_covariate {
            let mut rng = epicast_core::rng_from_seed(
                config.seed ^ fnv1a_f64(&[county.len() as f64]).wrapping_add(
                    county.bytes().fold(0u64, |h, b| {
                        h.wrapping_mul(31).wrapping_add(b as u64)
                    }),
                ),
            );
            unknown.push(NamedSeries {
                name: "noise".into(),
                values: (0..len).map(|_| rng.random::<f64>()).collect(),
            });
        }

        let mut known = Vec::new();
        for (j, name) in OXFORD_NAMES.iter().enumerate() {
            let scale = ScaleParams::fit(&oxford_series[j][train_range.clone()])?;
            known.push(NamedSeries {
                name: (*name).into(),
                values: scale.transform_all(&oxford_series[j]),
            });
        }
        known.extend(crate::dates::calendar_covariates(start, len));

        let panel = CountyPanel {
            county_id: county.clone(),
            start_day: start,
            target,
            target_scaled,
            unknown,
            known,
            target_scale,
            split: bounds,
        };
        panel.validate()?;
        panels.push(panel);
    }
    if panels.is_empty() {
        return Err(AppError::Other(
            "no county produced a usable panel".into(),
        ));
    }
    Ok(PipelineOutput { panels, excluded })
}

/// Vocabulary over the training counties only.
pub fn training_vocab(output: &PipelineOutput, holdout: &[String]) -> CountyVocab {
    let (train, _) = output.partition(holdout);
    CountyVocab::from_panels(&train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rawio::{CaseRow, OxfordRow, ViralRow};

    fn synth_raw(counties: usize, days: usize) -> RawRecords {
        let mut raw = RawRecords::default();
        for c in 0..counties {
            let id = format!("county{c:02}");
            let region = format!("region{c:02}");
            raw.county_map.insert(id.clone(), region.clone());
            let mut cum = 0.0;
            for d in 0..days {
                cum += 5.0 + 3.0 * ((d + c) as f64 * 0.15).sin().abs();
                raw.cases.push(CaseRow {
                    county: id.clone(),
                    day: 18628 + d as i64,
                    cumulative: cum,
                });
                raw.oxford.push(OxfordRow {
                    region: region.clone(),
                    day: 18628 + d as i64,
                    values: [40.0, 50.0, 60.0, 30.0],
                });
                if d % 7 == 0 {
                    raw.viral.push(ViralRow {
                        county: id.clone(),
                        day: 18628 + d as i64,
                        concentration: 100.0 + 50.0 * ((d + c) as f64 * 0.1).cos(),
                    });
                }
            }
        }
        raw
    }

    fn test_config(dir: &std::path::Path) -> ExperimentConfig {
        let text = format!(
            r#"{{
                "out_dir": "{}",
                "synth": {{}},
                "window": {{ "lookback": 14, "horizon": 5, "train_stride": 1 }},
                "backtest": {{ "horizon": 5, "stride": 5 }}
            }}"#,
            dir.display()
        );
        let p = dir.join("cfg.json");
        std::fs::write(&p, text).unwrap();
        ExperimentConfig::load(&p).unwrap()
    }

    #[test]
    fn panels_are_aligned_and_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = test_config(dir.path());
        let raw = synth_raw(3, 120);
        let out = build_panels(&raw, &cfg).unwrap();
        assert_eq!(out.panels.len(), 3);
        assert!(out.excluded.is_empty());
        for p in &out.panels {
            p.validate().unwrap();
            // viral + 4 oxford + 4 calendar
            assert_eq!(p.unknown.len(), 1);
            assert_eq!(p.known.len(), 8);
            // scaled target in [0,1] on the training region
            for &v in &p.target_scaled[..p.split.train_end] {
                assert!((0.0..=1.0).contains(&v));
            }
            // round-trip
            for (i, &orig) in p.target.iter().enumerate() {
                let rt = p.target_scale.inverse(p.target_scaled[i]);
                assert!((rt - orig).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_few_viral_samples_excludes_the_county() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = test_config(dir.path());
        let mut raw = synth_raw(2, 120);
        let county = "county01".to_string();
        raw.viral.retain(|r| r.county != county);
        raw.viral.push(ViralRow {
            county: county.clone(),
            day: 18628,
            concentration: 5.0,
        });
        let out = build_panels(&raw, &cfg).unwrap();
        assert_eq!(out.panels.len(), 1);
        assert_eq!(out.excluded.len(), 1);
        assert_eq!(out.excluded[0].0, county);
    }

    #[test]
    fn case_gap_is_a_hard_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = test_config(dir.path());
        let mut raw = synth_raw(1, 120);
        raw.cases.retain(|r| r.day != 18628 + 60);
        let err = build_panels(&raw, &cfg).unwrap_err();
        assert!(err.to_string().contains("gap"));
    }

    #[test]
    fn trim_dates_cut_the_tail() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = test_config(dir.path());
        let full = build_panels(&synth_raw(1, 120), &cfg).unwrap().panels[0].len();
        cfg.trim_dates
            .insert("county00".into(), "2021-04-15".into());
        let trimmed = build_panels(&synth_raw(1, 120), &cfg).unwrap().panels[0].len();
        assert!(trimmed < full);
    }

    #[test]
    fn viral_ablation_drops_only_the_series() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = test_config(dir.path());
        let out = build_panels(&synth_raw(2, 120), &cfg).unwrap();
        let without = drop_unknown(&out.panels, "viral_load");
        for (a, b) in out.panels.iter().zip(&without) {
            assert_eq!(b.unknown.len(), 0);
            assert_eq!(a.split, b.split);
            assert_eq!(a.target_scaled, b.target_scaled);
            assert_eq!(a.known.len(), b.known.len());
        }
    }

    #[test]
    fn noise_covariate_is_deterministic_per_seed() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = test_config(dir.path());
        cfg.model.noise_covariate = true;
        let a = build_panels(&synth_raw(1, 120), &cfg).unwrap();
        let b = build_panels(&synth_raw(1, 120), &cfg).unwrap();
        let na = a.panels[0].unknown.iter().find(|s| s.name == "noise").unwrap();
        let nb = b.panels[0].unknown.iter().find(|s| s.name == "noise").unwrap();
        assert_eq!(na.values, nb.values);
        cfg.seed = 999;
        let c = build_panels(&synth_raw(1, 120), &cfg).unwrap();
        let nc = c.panels[0].unknown.iter().find(|s| s.name == "noise").unwrap();
        assert_ne!(na.values, nc.values);
    }
}
