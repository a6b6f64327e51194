use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use labmae::carbon::EmissionRecord;
use labmae::eval::{self, Metric, MetricRecord, Stratum};

use crate::fail::{CliError, CliResult};
use crate::svg::grouped_bars;

fn put(out: &Path, name: &str, body: &str, written: &mut Vec<String>) -> CliResult<()> {
    let p = out.join(name);
    fs::write(&p, body).map_err(|e| CliError::io(&p, e))?;
    written.push(name.to_string());
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn metric_value(r: &MetricRecord, m: Metric) -> Option<f64> {
    match m {
        Metric::Rmse => Some(r.rmse),
        Metric::Wasserstein => Some(r.wasserstein),
        Metric::R2 => r.r2,
    }
}

/// Writes charts, the win-count table and `report.html`. Only unstratified
/// records are charted. Returns the file names written.
pub fn write(
    records: &[MetricRecord],
    reference: &str,
    emissions: Option<&[EmissionRecord]>,
    out: &Path,
) -> CliResult<Vec<String>> {
    let overall: Vec<&MetricRecord> =
        records.iter().filter(|r| r.group.is_none() && r.stratum == Stratum::All).collect();
    let mut features: Vec<String> = Vec::new();
    for r in &overall {
        if !features.contains(&r.feature_id) {
            features.push(r.feature_id.clone());
        }
    }
    let mut methods: Vec<String> = Vec::new();
    for r in &overall {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let mut written = Vec::new();
    let mut html = String::from(
        "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>Imputation report</title></head><body>\n<h1>Imputation report</h1>\n",
    );

    if methods.len() > 1 && methods.iter().any(|m| m == reference) {
        let owned: Vec<MetricRecord> = overall.iter().map(|r| (*r).clone()).collect();
        let table = eval::win_counts(&owned, reference)?;
        let md = table.to_markdown();
        put(out, "win_counts.md", &md, &mut written)?;
        let _ = write!(html, "<h2>Win counts against {}</h2>\n<pre>{}</pre>\n", escape(reference), escape(&md));
    }

    for m in Metric::ALL {
        let values: Vec<Vec<Option<f64>>> = methods
            .iter()
            .map(|method| {
                features
                    .iter()
                    .map(|f| {
                        overall
                            .iter()
                            .find(|r| &r.method == method && &r.feature_id == f)
                            .and_then(|r| metric_value(r, m))
                    })
                    .collect()
            })
            .collect();
        let svg = grouped_bars(&format!("{} per feature", m.label()), &features, &methods, &values);
        let name = format!("{}.svg", m.label().to_lowercase());
        let _ = write!(html, "<h2>{}</h2>\n{svg}\n", m.label());
        put(out, &name, &svg, &mut written)?;
    }

    if let Some(em) = emissions {
        let regions: BTreeSet<&str> = em.iter().map(|r| r.region.as_str()).collect();
        let mut series: Vec<String> = Vec::new();
        for r in em {
            let s = format!("{} b={}", r.model_name, r.batch_size);
            if !series.contains(&s) {
                series.push(s);
            }
        }
        let categories: Vec<String> = regions.iter().map(|s| s.to_string()).collect();
        let values: Vec<Vec<Option<f64>>> = series
            .iter()
            .map(|s| {
                categories
                    .iter()
                    .map(|region| {
                        em.iter()
                            .find(|r| &r.region == region && &format!("{} b={}", r.model_name, r.batch_size) == s)
                            .map(|r| r.emissions_kg)
                    })
                    .collect()
            })
            .collect();
        let svg = grouped_bars("Emissions (kg CO2e)", &categories, &series, &values);
        let _ = write!(html, "<h2>Emissions</h2>\n{svg}\n");
        put(out, "emissions.svg", &svg, &mut written)?;
    }

    html.push_str("</body></html>\n");
    put(out, "report.html", &html, &mut written)?;
    Ok(written)
}
