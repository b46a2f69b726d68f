//! Cohort CSV and schema sidecar files.
//!
//! Cohort file: header row, then `id,time,event`, then for each modality in
//! fixed order a `<name>_present` column (0/1) followed by `<name>_0 ..
//! <name>_{d-1}`. Absent blocks hold `0` and empty cells. Synthetic cohorts
//! append a trailing `true_risk` column.
//!
//! Schema file: `key=value` lines with keys `radiology_dim`, `pathology_dim`,
//! `genomics_dim`, `demographics_dim`, `embedding_dim`. `#` starts a comment.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{
    Cohort, ModalityId, ModalitySchema, PatientRecord, DEFAULT_EMBEDDING_DIM, NUM_MODALITIES,
};
use crate::error::{Error, Result};

const RISK_COLUMN: &str = "true_risk";

fn header(schema: &ModalitySchema, with_risk: bool) -> Vec<String> {
    let mut h = vec!["id".to_string(), "time".into(), "event".into()];
    for m in ModalityId::ALL {
        h.push(format!("{m}_present"));
        h.extend((0..schema.raw_dim(m)).map(|k| format!("{m}_{k}")));
    }
    if with_risk {
        h.push(RISK_COLUMN.into());
    }
    h
}

/// `{:?}` is the shortest representation that parses back to the same bits.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_cohort<W: Write>(out: W, cohort: &Cohort) -> Result<()> {
    let schema = cohort.schema();
    let gt = cohort.ground_truth_risk();
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Config(format!("csv write failed: {e}"));
    w.write_record(header(schema, gt.is_some()))
        .map_err(csv_err)?;
    for (i, r) in cohort.records().iter().enumerate() {
        let mut row = vec![
            r.id.clone(),
            fmt_f64(r.time),
            if r.event { "1" } else { "0" }.to_string(),
        ];
        for m in ModalityId::ALL {
            match r.features(m) {
                Some(x) => {
                    row.push("1".into());
                    row.extend(x.iter().map(|&v| fmt_f64(v)));
                }
                None => {
                    row.push("0".into());
                    row.extend(std::iter::repeat_n(String::new(), schema.raw_dim(m)));
                }
            }
        }
        if let Some(g) = gt {
            row.push(fmt_f64(g[i]));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| Error::Config(format!("csv flush failed: {e}")))?;
    Ok(())
}

pub fn read_cohort<R: Read>(input: R, schema: &ModalitySchema) -> Result<Cohort> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(input);
    let parse_err = |line: usize, msg: String| Error::Parse { line, msg };
    let hdr = rdr
        .headers()
        .map_err(|e| parse_err(1, format!("cannot read header: {e}")))?
        .clone();
    let base = header(schema, false);
    let with_risk = hdr.len() == base.len() + 1 && hdr.get(base.len()) == Some(RISK_COLUMN);
    if hdr.len() != base.len() && !with_risk {
        return Err(parse_err(
            1,
            format!(
                "header has {} columns, schema implies {} (dimension mismatch vs. schema)",
                hdr.len(),
                base.len()
            ),
        ));
    }
    for (k, (got, want)) in hdr.iter().zip(&base).enumerate() {
        if got.trim() != want {
            return Err(parse_err(
                1,
                format!("column {k} is {got:?}, expected {want:?}"),
            ));
        }
    }

    let mut records = Vec::new();
    let mut risks = Vec::new();
    for (row_no, row) in rdr.records().enumerate() {
        let line = row_no + 2;
        let row = row.map_err(|e| parse_err(line, format!("malformed row: {e}")))?;
        let cell = |k: usize| row.get(k).unwrap_or("").trim();
        let id = cell(0).to_string();
        if id.is_empty() {
            return Err(parse_err(line, "empty id".into()));
        }
        let time: f64 = cell(1)
            .parse()
            .map_err(|_| Error::record(&id, format!("bad time {:?} (line {line})", cell(1))))?;
        let event = match cell(2) {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::record(
                    &id,
                    format!("event must be 0 or 1, got {other:?}"),
                ))
            }
        };
        let mut col = 3;
        let mut features: [Option<Vec<f64>>; NUM_MODALITIES] = Default::default();
        for m in ModalityId::ALL {
            let dim = schema.raw_dim(m);
            let present = cell(col);
            let cells = (col + 1..col + 1 + dim).map(cell);
            match present {
                "1" => {
                    let x = cells
                        .map(|c| {
                            c.parse::<f64>().map_err(|_| {
                                Error::record(
                                    &id,
                                    format!("{m}: bad feature value {c:?} (line {line})"),
                                )
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    features[m.index()] = Some(x);
                }
                "0" => {
                    if let Some(c) = cells.into_iter().find(|c| !c.is_empty()) {
                        return Err(Error::record(
                            &id,
                            format!("{m} is marked absent but has value {c:?} (line {line})"),
                        ));
                    }
                }
                other => {
                    return Err(Error::record(
                        &id,
                        format!("{m}_present must be 0 or 1, got {other:?} (line {line})"),
                    ))
                }
            }
            col += 1 + dim;
        }
        if with_risk {
            let r: f64 = cell(col)
                .parse()
                .map_err(|_| Error::record(&id, format!("bad {RISK_COLUMN} (line {line})")))?;
            risks.push(r);
        }
        let rec = PatientRecord::new(id, time, event, features);
        rec.validate(schema)?;
        records.push(rec);
    }
    Cohort::new(*schema, records, with_risk.then_some(risks))
}

pub fn load_cohort(path: &Path, schema: &ModalitySchema) -> Result<Cohort> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_cohort(std::io::BufReader::new(f), schema)
}

pub fn save_cohort(cohort: &Cohort, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_cohort(std::io::BufWriter::new(f), cohort)
}

pub fn schema_to_string(schema: &ModalitySchema) -> String {
    let mut s = String::new();
    for m in ModalityId::ALL {
        s.push_str(&format!("{m}_dim={}\n", schema.raw_dim(m)));
    }
    s.push_str(&format!("embedding_dim={}\n", schema.embedding_dim()));
    s
}

pub fn parse_schema(text: &str) -> Result<ModalitySchema> {
    let mut dims: [Option<usize>; NUM_MODALITIES] = [None; NUM_MODALITIES];
    let mut embedding = None;
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: k + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        let value: usize = value.trim().parse().map_err(|_| Error::Parse {
            line: k + 1,
            msg: format!("value for {:?} is not a count", key.trim()),
        })?;
        let key = key.trim();
        if key == "embedding_dim" {
            embedding = Some(value);
            continue;
        }
        let m = key
            .strip_suffix("_dim")
            .and_then(|name| name.parse::<ModalityId>().ok())
            .ok_or_else(|| Error::Parse {
                line: k + 1,
                msg: format!("unknown schema key {key:?}"),
            })?;
        dims[m.index()] = Some(value);
    }
    let mut raw = [0; NUM_MODALITIES];
    for m in ModalityId::ALL {
        raw[m.index()] =
            dims[m.index()].ok_or_else(|| Error::Config(format!("schema is missing {m}_dim")))?;
    }
    ModalitySchema::new(raw, embedding.unwrap_or(DEFAULT_EMBEDDING_DIM))
}

pub fn load_schema(path: &Path) -> Result<ModalitySchema> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_schema(&text)
}

pub fn save_schema(schema: &ModalitySchema, path: &Path) -> Result<()> {
    std::fs::write(path, schema_to_string(schema)).map_err(|e| Error::io(path, e))
}
