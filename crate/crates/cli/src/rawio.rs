//! Raw CSV schemas: the three data sources plus the county-to-region map,
//! with strict headers and row-numbered validation errors. Also the
//! emitters used by the synthetic generator and the forecast writer.
//!
//! Every emitted CSV starts with a `# config_hash=.. seed=..` comment line;
//! all readers here skip `#` comments.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use epicast_core::eval::ForecastBlock;
use epicast_core::synth::SynthOutput;

use crate::dates::{format_day, parse_day};
use crate::error::{AppError, Result};

pub const CASES_HEADER: [&str; 3] = ["county_id", "date", "cumulative_cases_per_100k"];
pub const VIRAL_HEADER: [&str; 3] = ["county_id", "date", "effective_concentration_gc_per_ml"];
pub const OXFORD_HEADER: [&str; 6] = [
    "region_id",
    "date",
    "gov_response",
    "containment_health",
    "stringency",
    "economic_support",
];
pub const COUNTY_MAP_HEADER: [&str; 2] = ["county_id", "region_id"];
pub const OXFORD_NAMES: [&str; 4] = [
    "gov_response",
    "containment_health",
    "stringency",
    "economic_support",
];

#[derive(Debug, Clone)]
pub struct CaseRow {
    pub county: String,
    pub day: i64,
    pub cumulative: f64,
}

#[derive(Debug, Clone)]
pub struct ViralRow {
    pub county: String,
    pub day: i64,
    pub concentration: f64,
}

#[derive(Debug, Clone)]
pub struct OxfordRow {
    pub region: String,
    pub day: i64,
    pub values: [f64; 4],
}

/// Typed raw inputs, exactly as loaded.
#[derive(Debug, Clone, Default)]
pub struct RawRecords {
    pub cases: Vec<CaseRow>,
    pub viral: Vec<ViralRow>,
    pub oxford: Vec<OxfordRow>,
    pub county_map: BTreeMap<String, String>,
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| AppError::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn check_header(path: &Path, got: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    for (i, want) in expected.iter().enumerate() {
        match got.get(i) {
            Some(g) if g == *want => {}
            got_col => {
                return Err(AppError::MissingColumn {
                    path: path.into(),
                    column: got_col.unwrap_or("<absent>").into(),
                    expected: (*want).into(),
                })
            }
        }
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    row: usize,
    field: &str,
    text: &str,
) -> Result<T> {
    text.parse().map_err(|_| AppError::Row {
        path: path.into(),
        row,
        message: format!("cannot parse `{text}` as {field}"),
    })
}

fn nonnegative(path: &Path, row: usize, field: &str, value: f64) -> Result<f64> {
    if value < 0.0 || !value.is_finite() {
        return Err(AppError::Row {
            path: path.into(),
            row,
            message: format!("{field} must be finite and nonnegative, got {value}"),
        });
    }
    Ok(value)
}

fn row_day(path: &Path, row: usize, text: &str) -> Result<i64> {
    parse_day(text).map_err(|e| AppError::Row {
        path: path.into(),
        row,
        message: e.to_string(),
    })
}

pub fn load_cases(path: &Path) -> Result<Vec<CaseRow>> {
    let mut rdr = reader(path)?;
    check_header(
        path,
        rdr.headers().map_err(|e| AppError::Csv {
            path: path.into(),
            source: e,
        })?,
        &CASES_HEADER,
    )?;
    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| AppError::Csv {
            path: path.into(),
            source: e,
        })?;
        let county = record.get(0).unwrap_or("").to_string();
        let day = row_day(path, row, record.get(1).unwrap_or(""))?;
        let cumulative: f64 =
            parse_field(path, row, "cumulative_cases_per_100k", record.get(2).unwrap_or(""))?;
        nonnegative(path, row, "cumulative_cases_per_100k", cumulative)?;
        out.push(CaseRow {
            county,
            day,
            cumulative,
        });
    }
    Ok(out)
}

pub fn load_viral(path: &Path) -> Result<Vec<ViralRow>> {
    let mut rdr = reader(path)?;
    check_header(
        path,
        rdr.headers().map_err(|e| AppError::Csv {
            path: path.into(),
            source: e,
        })?,
        &VIRAL_HEADER,
    )?;
    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| AppError::Csv {
            path: path.into(),
            source: e,
        })?;
        let county = record.get(0).unwrap_or("").to_string();
        let day = row_day(path, row, record.get(1).unwrap_or(""))?;
        let concentration: f64 = parse_field(
            path,
            row,
            "effective_concentration_gc_per_ml",
            record.get(2).unwrap_or(""),
        )?;
        nonnegative(path, row, "effective_concentration_gc_per_ml", concentration)?;
        out.push(ViralRow {
            county,
            day,
            concentration,
        });
    }
    Ok(out)
}

pub fn load_oxford(path: &Path) -> Result<Vec<OxfordRow>> {
    let mut rdr = reader(path)?;
    check_header(
        path,
        rdr.headers().map_err(|e| AppError::Csv {
            path: path.into(),
            source: e,
        })?,
        &OXFORD_HEADER,
    )?;
    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| AppError::Csv {
            path: path.into(),
            source: e,
        })?;
        let region = record.get(0).unwrap_or("").to_string();
        let day = row_day(path, row, record.get(1).unwrap_or(""))?;
        let mut values = [0.0; 4];
        for (j, name) in OXFORD_NAMES.iter().enumerate() {
            let v: f64 = parse_field(path, row, name, record.get(2 + j).unwrap_or(""))?;
            values[j] = nonnegative(path, row, name, v)?;
        }
        out.push(OxfordRow {
            region,
            day,
            values,
        });
    }
    Ok(out)
}

pub fn load_county_map(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut rdr = reader(path)?;
    check_header(
        path,
        rdr.headers().map_err(|e| AppError::Csv {
            path: path.into(),
            source: e,
        })?,
        &COUNTY_MAP_HEADER,
    )?;
    let mut out = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| AppError::Csv {
            path: path.into(),
            source: e,
        })?;
        let county = record.get(0).unwrap_or("").to_string();
        let region = record.get(1).unwrap_or("").to_string();
        if county.is_empty() || region.is_empty() {
            return Err(AppError::Row {
                path: path.into(),
                row,
                message: "county_id and region_id must be nonempty".into(),
            });
        }
        out.insert(county, region);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RawPaths {
    pub cases: PathBuf,
    pub viral: PathBuf,
    pub oxford: PathBuf,
    pub county_map: PathBuf,
}

pub fn load_all(paths: &RawPaths) -> Result<RawRecords> {
    Ok(RawRecords {
        cases: load_cases(&paths.cases)?,
        viral: load_viral(&paths.viral)?,
        oxford: load_oxford(&paths.oxford)?,
        county_map: load_county_map(&paths.county_map)?,
    })
}

// ---------------------------------------------------------------------------
// emitters
// ---------------------------------------------------------------------------

/// `# config_hash=<hex> seed=<n>` stamp carried by every emitted file.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn comment_line(&self) -> String {
        format!("# config_hash={} seed={}", self.config_hash, self.seed)
    }
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| AppError::io(parent, e))?;
    }
    fs::File::create(path).map_err(|e| AppError::io(path, e))
}

fn write_csv(path: &Path, prov: &Provenance, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut file = create(path)?;
    let mut text = String::new();
    text.push_str(&prov.comment_line());
    text.push('\n');
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    file.write_all(text.as_bytes())
        .map_err(|e| AppError::io(path, e))
}

/// Write the synthetic bundle in the exact raw schemas, starting at
/// `start_day` (so dates are realistic).
pub fn write_synth_csvs(
    dir: &Path,
    synth: &SynthOutput,
    start_day: i64,
    prov: &Provenance,
) -> Result<RawPaths> {
    let mut cases = Vec::new();
    let mut viral = Vec::new();
    let mut oxford = Vec::new();
    let mut map = Vec::new();
    for county in &synth.counties {
        map.push(vec![county.county_id.clone(), county.region_id.clone()]);
        for (t, v) in county.cumulative_cases_per_100k.iter().enumerate() {
            cases.push(vec![
                county.county_id.clone(),
                format_day(start_day + t as i64),
                format!("{v}"),
            ]);
        }
        for (t, v) in &county.viral_samples {
            viral.push(vec![
                county.county_id.clone(),
                format_day(start_day + *t as i64),
                format!("{v}"),
            ]);
        }
        for t in 0..county.oxford[0].len() {
            let mut row = vec![
                county.region_id.clone(),
                format_day(start_day + t as i64),
            ];
            for series in &county.oxford {
                row.push(format!("{}", series[t]));
            }
            oxford.push(row);
        }
    }
    let paths = RawPaths {
        cases: dir.join("cases.csv"),
        viral: dir.join("viral.csv"),
        oxford: dir.join("oxford.csv"),
        county_map: dir.join("county_map.csv"),
    };
    write_csv(&paths.cases, prov, &CASES_HEADER, &cases)?;
    write_csv(&paths.viral, prov, &VIRAL_HEADER, &viral)?;
    write_csv(&paths.oxford, prov, &OXFORD_HEADER, &oxford)?;
    write_csv(&paths.county_map, prov, &COUNTY_MAP_HEADER, &map)?;
    Ok(paths)
}

/// `county_id,origin_date,horizon_step,q05,q50,q95,actual` rows, one per
/// horizon step per forecast block. With more than three quantiles, the
/// first / median / last are written.
pub fn write_forecasts_csv(
    path: &Path,
    blocks: &[ForecastBlock],
    quantiles: &[f64],
    prov: &Provenance,
) -> Result<()> {
    let med = epicast_core::eval::median_index(quantiles);
    let last = quantiles.len() - 1;
    let mut rows = Vec::new();
    for block in blocks {
        for (step, (qs, actual)) in block.quantiles.iter().zip(&block.actuals).enumerate() {
            rows.push(vec![
                block.county_id.clone(),
                format_day(block.origin_day),
                format!("{}", step + 1),
                format!("{}", qs[0]),
                format!("{}", qs[med]),
                format!("{}", qs[last]),
                format!("{actual}"),
            ]);
        }
    }
    write_csv(
        path,
        prov,
        &[
            "county_id",
            "origin_date",
            "horizon_step",
            "q05",
            "q50",
            "q95",
            "actual",
        ],
        &rows,
    )
}

/// A parsed forecasts.csv row (used by the plot subcommand).
#[derive(Debug, Clone)]
pub struct ForecastRow {
    pub county: String,
    pub origin_day: i64,
    pub step: usize,
    pub q_low: f64,
    pub q_mid: f64,
    pub q_high: f64,
    pub actual: f64,
}

pub fn load_forecasts_csv(path: &Path) -> Result<Vec<ForecastRow>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| AppError::Csv {
        path: path.into(),
        source: e,
    })?;
    check_header(
        path,
        headers,
        &[
            "county_id",
            "origin_date",
            "horizon_step",
            "q05",
            "q50",
            "q95",
            "actual",
        ],
    )?;
    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| AppError::Csv {
            path: path.into(),
            source: e,
        })?;
        out.push(ForecastRow {
            county: record.get(0).unwrap_or("").to_string(),
            origin_day: row_day(path, row, record.get(1).unwrap_or(""))?,
            step: parse_field(path, row, "horizon_step", record.get(2).unwrap_or(""))?,
            q_low: parse_field(path, row, "q05", record.get(3).unwrap_or(""))?,
            q_mid: parse_field(path, row, "q50", record.get(4).unwrap_or(""))?,
            q_high: parse_field(path, row, "q95", record.get(5).unwrap_or(""))?,
            actual: parse_field(path, row, "actual", record.get(6).unwrap_or(""))?,
        });
    }
    Ok(out)
}

/// Panel cache: one CSV of aligned columns per county plus a JSON sidecar
/// with scale parameters and split boundaries.
pub fn write_panel_cache(
    dir: &Path,
    panels: &[epicast_core::panel::CountyPanel],
    prov: &Provenance,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for panel in panels {
        let mut header: Vec<String> = vec!["date".into(), "target".into(), "target_scaled".into()];
        for s in &panel.unknown {
            header.push(s.name.clone());
        }
        for s in &panel.known {
            header.push(s.name.clone());
        }
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let mut rows = Vec::with_capacity(panel.len());
        for i in 0..panel.len() {
            let mut row = vec![
                format_day(panel.start_day + i as i64),
                format!("{}", panel.target[i]),
                format!("{}", panel.target_scaled[i]),
            ];
            for s in panel.unknown.iter().chain(panel.known.iter()) {
                row.push(format!("{}", s.values[i]));
            }
            rows.push(row);
        }
        let csv_path = dir.join(format!("{}.csv", panel.county_id));
        write_csv(&csv_path, prov, &header_refs, &rows)?;

        let sidecar = serde_json::json!({
            "config_hash": prov.config_hash,
            "seed": prov.seed,
            "county_id": panel.county_id,
            "start_date": format_day(panel.start_day),
            "target_scale": { "min": panel.target_scale.min, "max": panel.target_scale.max },
            "split": {
                "train_end": panel.split.train_end,
                "validation_end": panel.split.validation_end,
                "len": panel.split.len,
            },
        });
        let json_path = dir.join(format!("{}.json", panel.county_id));
        write_json(&json_path, &sidecar)?;
        written.push(csv_path);
        written.push(json_path);
    }
    Ok(written)
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = create(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| AppError::Json {
        path: path.into(),
        source: e,
    })?;
    file.write_all(text.as_bytes())
        .map_err(|e| AppError::io(path, e))?;
    file.write_all(b"\n").map_err(|e| AppError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_csv(content: &str) -> tempfile::NamedTempFile {
        use std::io::Write as _;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn well_formed_cases_parse() {
        let f = temp_csv(
            "county_id,date,cumulative_cases_per_100k\n\
             a,2021-01-01,10.5\n\
             a,2021-01-02,12.0\n\
             b,2021-01-01,3.25\n",
        );
        let rows = load_cases(f.path()).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].county, "a");
        assert_eq!(rows[1].cumulative, 12.0);
    }

    #[test]
    fn missing_date_column_names_it() {
        let f = temp_csv("county_id,when,cumulative_cases_per_100k\na,2021-01-01,1\n");
        let err = load_cases(f.path()).unwrap_err();
        match err {
            AppError::MissingColumn { expected, .. } => assert_eq!(expected, "date"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn malformed_date_reports_row_number() {
        let f = temp_csv(
            "county_id,date,cumulative_cases_per_100k\n\
             a,2021-01-01,1\n\
             a,13/45/2021,2\n",
        );
        let err = load_cases(f.path()).unwrap_err();
        match err {
            AppError::Row { row, .. } => assert_eq!(row, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn negative_concentration_is_rejected() {
        let f = temp_csv(
            "county_id,date,effective_concentration_gc_per_ml\n\
             a,2021-01-01,-3.0\n",
        );
        let err = load_viral(f.path()).unwrap_err();
        assert!(matches!(err, AppError::Row { row: 1, .. }));
    }

    #[test]
    fn comment_lines_are_skipped() {
        let f = temp_csv(
            "# config_hash=abc seed=1\n\
             county_id,region_id\n\
             a,r1\n",
        );
        let map = load_county_map(f.path()).unwrap();
        assert_eq!(map.get("a").map(String::as_str), Some("r1"));
    }
}
