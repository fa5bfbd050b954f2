//! Static SVG plots: per-county forecasts with 90% interval bands, and the
//! variable-importance bar chart. No display server involved; plain vector
//! files.

use epicast_core::tft::ImportanceReport;

use crate::dates::format_day;
use crate::rawio::ForecastRow;

const W: f64 = 860.0;
const H: f64 = 420.0;
const ML: f64 = 64.0; // margins
const MR: f64 = 16.0;
const MT: f64 = 36.0;
const MB: f64 = 44.0;

fn poly(points: &[(f64, f64)]) -> String {
    points
        .iter()
        .map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Forecast plot for one county: actuals, median forecast, and the
/// low-high quantile band per forecast block.
pub fn forecast_svg(county: &str, rows: &[ForecastRow]) -> String {
    let mut rows: Vec<&ForecastRow> = rows.iter().filter(|r| r.county == county).collect();
    rows.sort_by_key(|r| (r.origin_day, r.step));
    if rows.is_empty() {
        return format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\"><text x=\"20\" y=\"30\">no forecasts for {county}</text></svg>");
    }
    let day_of = |r: &ForecastRow| r.origin_day + r.step as i64 - 1;
    let x_min = day_of(rows[0]) as f64;
    let x_max = rows.iter().map(|r| day_of(r)).max().unwrap() as f64;
    let mut y_max = 0.0f64;
    for r in &rows {
        y_max = y_max.max(r.actual).max(r.q_high);
    }
    y_max = (y_max * 1.08).max(1e-9);
    let xs = |d: f64| ML + (d - x_min) / (x_max - x_min).max(1.0) * (W - ML - MR);
    let ys = |v: f64| H - MB - v / y_max * (H - MT - MB);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n<text x=\"{ML}\" y=\"22\" font-family=\"sans-serif\" font-size=\"15\" font-weight=\"bold\">{county}: 10-day-ahead forecasts with 90% interval</text>\n"
    ));

    // axes and ticks
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#333\"/>\n<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{0}\" stroke=\"#333\"/>\n",
        H - MB,
        W - MR
    ));
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = ys(v);
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{y:.1}\" x2=\"{1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n<text x=\"{2}\" y=\"{3:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{v:.1}</text>\n",
            ML, W - MR, ML - 6.0, y + 4.0
        ));
    }
    for i in 0..=4 {
        let d = x_min + (x_max - x_min) * i as f64 / 4.0;
        let x = xs(d);
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{0}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{1}</text>\n",
            H - MB + 16.0,
            format_day(d as i64)
        ));
    }

    // interval band + median per forecast block
    let mut blocks: Vec<i64> = rows.iter().map(|r| r.origin_day).collect();
    blocks.dedup();
    for origin in &blocks {
        let block: Vec<&&ForecastRow> = rows.iter().filter(|r| r.origin_day == *origin).collect();
        let mut band: Vec<(f64, f64)> = block
            .iter()
            .map(|r| (xs(day_of(r) as f64), ys(r.q_high)))
            .collect();
        band.extend(
            block
                .iter()
                .rev()
                .map(|r| (xs(day_of(r) as f64), ys(r.q_low))),
        );
        svg.push_str(&format!(
            "<polygon points=\"{}\" fill=\"#4a90d9\" fill-opacity=\"0.25\" stroke=\"none\"/>\n",
            poly(&band)
        ));
        let median: Vec<(f64, f64)> = block
            .iter()
            .map(|r| (xs(day_of(r) as f64), ys(r.q_mid)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#1d5fa8\" stroke-width=\"1.8\"/>\n",
            poly(&median)
        ));
    }

    // actuals across all blocks
    let actual: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (xs(day_of(r) as f64), ys(r.actual)))
        .collect();
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#c0392b\" stroke-width=\"1.6\" stroke-dasharray=\"4,2\"/>\n",
        poly(&actual)
    ));

    // legend
    svg.push_str(&format!(
        "<text x=\"{0}\" y=\"22\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\"><tspan fill=\"#c0392b\">actual</tspan>  <tspan fill=\"#1d5fa8\">median</tspan>  <tspan fill=\"#4a90d9\">90% band</tspan></text>\n",
        W - MR
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Horizontal bar chart of encoder / decoder variable importance.
pub fn importance_svg(report: &ImportanceReport) -> String {
    let n = report.encoder.len() + report.decoder.len();
    let row_h = 24.0;
    let height = MT + 40.0 + n as f64 * row_h + 40.0;
    let max_pct = report
        .encoder
        .iter()
        .chain(report.decoder.iter())
        .map(|(_, p)| *p)
        .fold(1.0f64, f64::max);
    let bar_w = |p: f64| (p / max_pct) * (W - ML - MR - 220.0);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{height}\" viewBox=\"0 0 {W} {height}\">\n<rect width=\"{W}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{ML}\" y=\"22\" font-family=\"sans-serif\" font-size=\"15\" font-weight=\"bold\">Variable importance (mean selection weight, %)</text>\n"
    ));
    let mut y = MT + 20.0;
    for (title, side, color) in [
        ("encoder", &report.encoder, "#1d5fa8"),
        ("decoder", &report.decoder, "#27ae60"),
    ] {
        svg.push_str(&format!(
            "<text x=\"{ML}\" y=\"{y:.1}\" font-family=\"sans-serif\" font-size=\"13\" font-weight=\"bold\">{title}</text>\n"
        ));
        y += 10.0;
        let mut sorted: Vec<&(String, f64)> = side.iter().collect();
        sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        for (name, pct) in sorted {
            let w = bar_w(*pct);
            svg.push_str(&format!(
                "<rect x=\"{0}\" y=\"{1:.1}\" width=\"{w:.1}\" height=\"16\" fill=\"{color}\" fill-opacity=\"0.8\"/>\n<text x=\"{2}\" y=\"{3:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{name}</text>\n<text x=\"{4:.1}\" y=\"{3:.1}\" font-family=\"sans-serif\" font-size=\"11\">{pct:.1}%</text>\n",
                ML + 160.0,
                y,
                ML + 152.0,
                y + 12.0,
                ML + 166.0 + w
            ));
            y += row_h;
        }
        y += 18.0;
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forecast_svg_contains_band_and_lines() {
        let rows: Vec<ForecastRow> = (0..10usize)
            .map(|i| ForecastRow {
                county: "c1".into(),
                origin_day: 18700 + (i as i64 / 5) * 5,
                step: (i % 5) + 1,
                q_low: 1.0,
                q_mid: 2.0,
                q_high: 3.0,
                actual: 2.5,
            })
            .collect();
        let svg = forecast_svg("c1", &rows);
        assert!(svg.contains("<polygon"));
        assert!(svg.contains("<polyline"));
        assert!(svg.contains("c1"));
        assert!(svg.starts_with("<svg"));
    }

    #[test]
    fn importance_svg_lists_variables() {
        let report = ImportanceReport {
            encoder: vec![("target".into(), 60.0), ("viral_load".into(), 40.0)],
            decoder: vec![("stringency".into(), 100.0)],
        };
        let svg = importance_svg(&report);
        assert!(svg.contains("viral_load"));
        assert!(svg.contains("stringency"));
        assert!(svg.contains("60.0%"));
    }
}
