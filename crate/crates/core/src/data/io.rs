//! Cohort CSV, ground-truth companion CSV and the fitted-stats JSON sidecar.
//!
//! Cohort layout: `subject_id, hadm_id, group, admit_time`, then for each
//! feature id `npval_{id}, nptime_{id}, npval_last_{id}, nptime_last_{id}`.
//! Empty fields are missing cells. Floats are written in shortest
//! round-trip form.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::cohort::{Cohort, PatientRow};
use super::schema::{FeatureStats, LabSchema, SlotKind};
use crate::error::{Error, Result};
use crate::math::Matrix;

const ID_COLUMNS: [&str; 4] = ["subject_id", "hadm_id", "group", "admit_time"];

pub fn write_cohort<W: Write>(cohort: &Cohort, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ID_COLUMNS.iter().map(|s| s.to_string()).collect();
    for feat in cohort.schema.features() {
        for kind in SlotKind::ALL {
            header.push(format!("{}{}", kind.column_prefix(), feat.id));
        }
    }
    w.write_record(&header).map_err(csv_err)?;
    let mut rec: Vec<String> = Vec::with_capacity(header.len());
    for row in &cohort.rows {
        rec.clear();
        rec.push(row.subject_id.clone());
        rec.push(row.admission_id.clone());
        rec.push(row.group.clone());
        rec.push(row.admission_time.to_string());
        for f in 0..cohort.schema.n_features() {
            for kind in SlotKind::ALL {
                rec.push(row.get(f, kind).map(render).unwrap_or_default());
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<cohort writer>", e))?;
    Ok(())
}

pub fn read_cohort<R: Read>(input: R) -> Result<Cohort> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r
        .headers()
        .map_err(|e| parse_err(0, "<header>", e.to_string()))?
        .clone();
    let ids = parse_header(&header)?;
    let schema = LabSchema::from_ids(&ids).map_err(|e| parse_err(0, "<header>", e.to_string()))?;
    let f = ids.len();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| parse_err(line, "<record>", e.to_string()))?;
        if rec.len() != header.len() {
            return Err(parse_err(line, "<record>", format!("expected {} fields, got {}", header.len(), rec.len())));
        }
        let mut row = PatientRow::empty(f);
        row.subject_id = rec[0].to_string();
        row.admission_id = rec[1].to_string();
        row.group = rec[2].to_string();
        row.admission_time = rec[3]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, "admit_time", format!("not an integer timestamp: `{}`", &rec[3])))?;
        for fi in 0..f {
            for kind in SlotKind::ALL {
                let col = 4 + fi * 4 + kind.offset();
                let field = rec[col].trim();
                if field.is_empty() {
                    continue;
                }
                let v: f64 = field
                    .parse()
                    .map_err(|_| parse_err(line, &header[col], format!("not a number: `{field}`")))?;
                if !v.is_finite() {
                    return Err(parse_err(line, &header[col], "non-finite value".into()));
                }
                if v < 0.0 {
                    let what = if kind.is_value() { "negative lab value" } else { "negative time offset" };
                    return Err(parse_err(line, &header[col], format!("{what} {v}")));
                }
                row.set(fi, kind, Some(v));
            }
        }
        row.check_invariants()
            .map_err(|e| parse_err(line, "<row>", e.to_string()))?;
        rows.push(row);
    }
    Cohort::new(schema, rows)
}

fn parse_header(header: &csv::StringRecord) -> Result<Vec<String>> {
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 4 || cols[..4] != ID_COLUMNS {
        return Err(parse_err(0, "<header>", format!("must start with {}", ID_COLUMNS.join(","))));
    }
    let rest = &cols[4..];
    if rest.len() % 4 != 0 {
        return Err(parse_err(0, "<header>", "feature columns must come in groups of four".into()));
    }
    let mut ids = Vec::new();
    for group in rest.chunks(4) {
        let id = group[0]
            .strip_prefix("npval_")
            .filter(|id| !id.starts_with("last_"))
            .ok_or_else(|| parse_err(0, group[0], "expected an npval_{id} column".into()))?;
        for kind in SlotKind::ALL {
            let expected = format!("{}{}", kind.column_prefix(), id);
            if group[kind.offset()] != expected {
                return Err(parse_err(0, group[kind.offset()], format!("expected `{expected}`")));
            }
        }
        ids.push(id.to_string());
    }
    Ok(ids)
}

pub fn save_cohort(cohort: &Cohort, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_cohort(cohort, std::io::BufWriter::new(file))?;
    if cohort.truth.is_some() {
        save_truth(cohort, &truth_path(path))?;
    }
    Ok(())
}

/// Loads a cohort; a `*.truth.csv` companion next to it is attached when present.
pub fn load_cohort(path: &Path) -> Result<Cohort> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let cohort = read_cohort(std::io::BufReader::new(file))?;
    let tp = truth_path(path);
    if tp.exists() {
        let truth = load_truth(&cohort, &tp)?;
        return cohort.with_truth(truth);
    }
    Ok(cohort)
}

/// `cohort.csv` → `cohort.truth.csv`.
pub fn truth_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("cohort");
    path.with_file_name(format!("{stem}.truth.csv"))
}

fn save_truth(cohort: &Cohort, path: &Path) -> Result<()> {
    let truth = cohort.ground_truth()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header = vec!["subject_id".to_string(), "hadm_id".to_string()];
    header.extend(cohort.schema.features().iter().map(|f| format!("truth_{}", f.id)));
    w.write_record(&header).map_err(csv_err)?;
    for (i, row) in cohort.rows.iter().enumerate() {
        let mut rec = vec![row.subject_id.clone(), row.admission_id.clone()];
        rec.extend(truth.row(i).iter().map(|&v| render(v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn load_truth(cohort: &Cohort, path: &Path) -> Result<Matrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(std::io::BufReader::new(file));
    let f = cohort.schema.n_features();
    let mut m = Matrix::zeros(cohort.len(), f);
    let mut n = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(i + 1, "<truth>", e.to_string()))?;
        if i >= cohort.len() || rec.len() != f + 2 || rec[1] != cohort.rows[i].admission_id {
            return Err(parse_err(i + 1, "hadm_id", "truth companion does not align with the cohort".into()));
        }
        for j in 0..f {
            let v: f64 = rec[j + 2]
                .parse()
                .map_err(|_| parse_err(i + 1, "<truth>", format!("not a number: `{}`", &rec[j + 2])))?;
            m.set(i, j, v);
        }
        n += 1;
    }
    if n != cohort.len() {
        return Err(parse_err(n, "<truth>", "truth companion row count differs from the cohort".into()));
    }
    Ok(m)
}

/// Fitted stats keyed by feature id.
pub fn stats_to_json(schema: &LabSchema) -> Result<String> {
    let stats = schema
        .stats()
        .ok_or_else(|| Error::State("normalizer has not been fitted".into()))?;
    let map: BTreeMap<&str, &FeatureStats> = schema
        .features()
        .iter()
        .map(|f| f.id.as_str())
        .zip(stats)
        .collect();
    Ok(serde_json::to_string_pretty(&map)?)
}

/// Attaches stats parsed from [`stats_to_json`] output to `schema`.
pub fn stats_from_json(schema: &LabSchema, json: &str) -> Result<LabSchema> {
    let map: BTreeMap<String, FeatureStats> = serde_json::from_str(json)?;
    let mut stats = Vec::with_capacity(schema.n_features());
    for f in schema.features() {
        stats.push(
            *map.get(&f.id)
                .ok_or_else(|| Error::UnknownFeature(format!("{} (absent from stats file)", f.id)))?,
        );
    }
    let mut out = schema.clone();
    out.set_stats(stats)?;
    Ok(out)
}

/// Shortest representation that parses back to the same `f64`.
pub fn render(v: f64) -> String {
    format!("{v}")
}

fn parse_err(row: usize, column: &str, msg: String) -> Error {
    Error::Parse {
        row,
        column: column.to_string(),
        msg,
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::io("<csv>", std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "subject_id,hadm_id,group,admit_time,npval_7,nptime_7,npval_last_7,nptime_last_7\n";

    #[test]
    fn header_only_is_empty_cohort() {
        let c = read_cohort(HEADER.as_bytes()).unwrap();
        assert!(c.is_empty());
        assert_eq!(c.schema.n_features(), 1);
    }

    #[test]
    fn negative_lab_value_is_rejected() {
        let csv = format!("{HEADER}s1,a1,g,10,-1,0,,\n");
        match read_cohort(csv.as_bytes()) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "npval_7");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_numeric_field_names_column() {
        let csv = format!("{HEADER}s1,a1,g,10,1.5,abc,,\n");
        assert!(matches!(read_cohort(csv.as_bytes()), Err(Error::Parse { column, .. }) if column == "nptime_7"));
    }

    #[test]
    fn malformed_header() {
        let csv = "subject_id,hadm_id,group,admit_time,npval_7,nptime_8,npval_last_7,nptime_last_7\n";
        assert!(matches!(read_cohort(csv.as_bytes()), Err(Error::Parse { row: 0, .. })));
        assert!(read_cohort("a,b\n".as_bytes()).is_err());
    }

    #[test]
    fn round_trip_is_exact() {
        let csv = format!("{HEADER}s1,a1,g,10,0.1,0,0.30000000000000004,2.5\ns2,a2,h,11,,,,\n");
        let c = read_cohort(csv.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_cohort(&c, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), csv);
        assert_eq!(read_cohort(buf.as_slice()).unwrap(), c);
    }

    #[test]
    fn stats_sidecar_round_trip() {
        let csv = format!("{HEADER}s1,a1,g,10,1,0,2,3\ns2,a2,g,11,4,1,5,6\ns3,a3,g,12,9,2,,\n");
        let c = read_cohort(csv.as_bytes()).unwrap();
        let fitted = c.fit_normalizer((0.005, 0.995)).unwrap();
        let json = stats_to_json(&fitted).unwrap();
        assert!(json.contains("\"clip_lo\""));
        let back = stats_from_json(&c.schema, &json).unwrap();
        assert_eq!(back, fitted);
    }
}
