//! CSV codecs for calibration data, candidate batches and per-row weights.
//!
//! Calibration: `f0..f{d-1}`, `y` in {0, 1}, optional `mu`, optional
//! `group`. Candidates: `f0..f{d-1}`, `mu`, optional `input` (batch key for
//! multi-input commands) and optional `y` (evaluation labels, never used for
//! inference). Weights: `source,index,w` with source `calibration` or
//! `candidate`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use confhit::{CandidateBatch, FeatureVector, LabeledPool};

use crate::error::InputError;
use crate::format::g17;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationData {
    pub pool: LabeledPool,
    pub groups: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateData {
    pub batch: CandidateBatch,
    pub inputs: Option<Vec<String>>,
    pub labels: Option<Vec<bool>>,
}

impl CandidateData {
    /// Splits rows by the `input` column in order of first appearance; one
    /// group when the column is absent.
    pub fn split_inputs(&self) -> Vec<(String, Vec<usize>)> {
        let Some(keys) = &self.inputs else {
            return vec![(String::new(), (0..self.batch.len()).collect())];
        };
        let mut order: Vec<(String, Vec<usize>)> = Vec::new();
        let mut slot: HashMap<&str, usize> = HashMap::new();
        for (i, k) in keys.iter().enumerate() {
            let s = *slot.entry(k.as_str()).or_insert_with(|| {
                order.push((k.clone(), Vec::new()));
                order.len() - 1
            });
            order[s].1.push(i);
        }
        order
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowWeights {
    pub calibration: Vec<f64>,
    pub candidates: Vec<f64>,
}

struct Layout {
    features: Vec<usize>,
    named: HashMap<String, usize>,
}

fn layout(headers: &csv::StringRecord, allowed: &[&str], name: &str) -> Result<Layout, InputError> {
    let mut feats: Vec<(usize, usize)> = Vec::new();
    let mut named = HashMap::new();
    for (col, h) in headers.iter().enumerate() {
        let h = h.trim();
        if let Some(idx) = h.strip_prefix('f').and_then(|r| r.parse::<usize>().ok()) {
            feats.push((idx, col));
        } else if allowed.contains(&h) {
            if named.insert(h.to_string(), col).is_some() {
                return Err(InputError::file(name, format!("duplicate column '{h}'")));
            }
        } else {
            return Err(InputError::file(
                name,
                format!("unknown column '{h}' (expected f0..f<d-1>, {})", allowed.join(", ")),
            ));
        }
    }
    feats.sort();
    if feats.is_empty() {
        return Err(InputError::file(name, "no feature columns (f0, f1, ...)"));
    }
    for (expect, &(idx, _)) in feats.iter().enumerate() {
        if idx != expect {
            return Err(InputError::file(name, format!("feature columns must be f0..f{}, missing f{expect}", feats.len() - 1)));
        }
    }
    Ok(Layout {
        features: feats.into_iter().map(|(_, c)| c).collect(),
        named,
    })
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

fn open(path: &Path) -> Result<File, InputError> {
    File::open(path).map_err(|e| InputError::file(&path.display().to_string(), format!("cannot open: {e}")))
}

fn csv_error(name: &str, e: csv::Error) -> InputError {
    match e.kind() {
        csv::ErrorKind::UnequalLengths { pos, expected_len, len } => InputError::Row {
            file: name.into(),
            line: pos.as_ref().map_or(0, |p| p.line()),
            message: format!("expected {expected_len} fields, found {len}"),
        },
        _ => InputError::file(name, e.to_string()),
    }
}

struct Rows<'a> {
    name: &'a str,
    headers: csv::StringRecord,
}

impl Rows<'_> {
    fn real(&self, rec: &csv::StringRecord, col: usize) -> Result<f64, InputError> {
        let raw = rec.get(col).unwrap_or("");
        let v: f64 = raw.parse().map_err(|_| self.cell(rec, col, format!("expected a number, got '{raw}'")))?;
        if !v.is_finite() {
            return Err(self.cell(rec, col, format!("non-finite value '{raw}'")));
        }
        Ok(v)
    }

    fn label(&self, rec: &csv::StringRecord, col: usize) -> Result<bool, InputError> {
        match rec.get(col).unwrap_or("") {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(self.cell(rec, col, format!("label must be 0 or 1, got '{other}'"))),
        }
    }

    fn features(&self, rec: &csv::StringRecord, cols: &[usize]) -> Result<FeatureVector, InputError> {
        let v = cols.iter().map(|&c| self.real(rec, c)).collect::<Result<Vec<_>, _>>()?;
        Ok(FeatureVector::new(v)?)
    }

    fn cell(&self, rec: &csv::StringRecord, col: usize, message: String) -> InputError {
        InputError::Cell {
            file: self.name.into(),
            line: rec.position().map_or(0, |p| p.line()),
            column: self.headers.get(col).unwrap_or("?").to_string(),
            message,
        }
    }
}

pub fn read_calibration<R: Read>(input: R, name: &str) -> Result<CalibrationData, InputError> {
    let mut rdr = reader(input);
    let headers = rdr.headers().map_err(|e| csv_error(name, e))?.clone();
    let lay = layout(&headers, &["y", "mu", "group"], name)?;
    let y_col = *lay
        .named
        .get("y")
        .ok_or_else(|| InputError::file(name, "missing required column 'y'"))?;
    let mu_col = lay.named.get("mu").copied();
    let group_col = lay.named.get("group").copied();
    let rows = Rows { name, headers };
    let (mut feats, mut labels, mut mu, mut groups) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(name, e))?;
        feats.push(rows.features(&rec, &lay.features)?);
        labels.push(rows.label(&rec, y_col)?);
        if let Some(c) = mu_col {
            mu.push(rows.real(&rec, c)?);
        }
        if let Some(c) = group_col {
            groups.push(rec.get(c).unwrap_or("").to_string());
        }
    }
    if feats.is_empty() {
        return Err(InputError::file(name, "no data rows"));
    }
    Ok(CalibrationData {
        pool: LabeledPool::new(feats, labels, mu_col.map(|_| mu))?,
        groups: group_col.map(|_| groups),
    })
}

pub fn read_candidates<R: Read>(input: R, name: &str) -> Result<CandidateData, InputError> {
    let mut rdr = reader(input);
    let headers = rdr.headers().map_err(|e| csv_error(name, e))?.clone();
    let lay = layout(&headers, &["mu", "input", "y"], name)?;
    let mu_col = *lay
        .named
        .get("mu")
        .ok_or_else(|| InputError::file(name, "missing required column 'mu' (every score needs predictor outputs)"))?;
    let input_col = lay.named.get("input").copied();
    let y_col = lay.named.get("y").copied();
    let rows = Rows { name, headers };
    let (mut feats, mut mu, mut inputs, mut labels) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(name, e))?;
        feats.push(rows.features(&rec, &lay.features)?);
        mu.push(rows.real(&rec, mu_col)?);
        if let Some(c) = input_col {
            inputs.push(rec.get(c).unwrap_or("").to_string());
        }
        if let Some(c) = y_col {
            labels.push(rows.label(&rec, c)?);
        }
    }
    if feats.is_empty() {
        return Err(InputError::file(name, "no data rows"));
    }
    Ok(CandidateData {
        batch: CandidateBatch::new(feats, mu)?,
        inputs: input_col.map(|_| inputs),
        labels: y_col.map(|_| labels),
    })
}

/// Reads a `source,index,w` table covering every row exactly once.
pub fn read_weights<R: Read>(
    input: R,
    name: &str,
    n_calibration: usize,
    n_candidates: usize,
) -> Result<RowWeights, InputError> {
    let mut rdr = reader(input);
    let headers = rdr.headers().map_err(|e| csv_error(name, e))?.clone();
    let col = |h: &str| {
        headers
            .iter()
            .position(|x| x == h)
            .ok_or_else(|| InputError::file(name, format!("missing required column '{h}'")))
    };
    let (src_col, idx_col, w_col) = (col("source")?, col("index")?, col("w")?);
    let rows = Rows { name, headers: headers.clone() };
    let mut cal = vec![None; n_calibration];
    let mut cand = vec![None; n_candidates];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(name, e))?;
        let target = match rec.get(src_col).unwrap_or("") {
            "calibration" => &mut cal,
            "candidate" => &mut cand,
            other => {
                return Err(rows.cell(&rec, src_col, format!("source must be 'calibration' or 'candidate', got '{other}'")))
            }
        };
        let raw = rec.get(idx_col).unwrap_or("");
        let idx: usize = raw
            .parse()
            .map_err(|_| rows.cell(&rec, idx_col, format!("expected a row index, got '{raw}'")))?;
        let len = target.len();
        let slot = target
            .get_mut(idx)
            .ok_or_else(|| rows.cell(&rec, idx_col, format!("index {idx} out of range (0..{len})")))?;
        if slot.is_some() {
            return Err(rows.cell(&rec, idx_col, format!("duplicate weight for index {idx}")));
        }
        let w = rows.real(&rec, w_col)?;
        if w <= 0.0 {
            return Err(rows.cell(&rec, w_col, format!("weight must be positive, got {w}")));
        }
        *slot = Some(w);
    }
    let complete = |v: Vec<Option<f64>>, what: &str| -> Result<Vec<f64>, InputError> {
        v.iter()
            .enumerate()
            .map(|(i, w)| w.ok_or_else(|| InputError::file(name, format!("no weight for {what} row {i}"))))
            .collect()
    };
    Ok(RowWeights {
        calibration: complete(cal, "calibration")?,
        candidates: complete(cand, "candidate")?,
    })
}

pub fn parse_calibration_csv(path: &Path) -> Result<CalibrationData, InputError> {
    read_calibration(open(path)?, &path.display().to_string())
}

pub fn parse_candidates_csv(path: &Path) -> Result<CandidateData, InputError> {
    read_candidates(open(path)?, &path.display().to_string())
}

pub fn parse_weights_csv(path: &Path, n_calibration: usize, n_candidates: usize) -> Result<RowWeights, InputError> {
    read_weights(open(path)?, &path.display().to_string(), n_calibration, n_candidates)
}

fn feature_header(d: usize) -> Vec<String> {
    (0..d).map(|c| format!("f{c}")).collect()
}

pub fn write_calibration<W: Write>(out: W, data: &CalibrationData) -> csv::Result<()> {
    let pool = &data.pool;
    let mut w = csv::Writer::from_writer(out);
    let mut header = feature_header(pool.dimension());
    header.push("y".into());
    if pool.predictor_scores().is_some() {
        header.push("mu".into());
    }
    if data.groups.is_some() {
        header.push("group".into());
    }
    w.write_record(&header)?;
    for i in 0..pool.len() {
        let mut rec: Vec<String> = pool.features()[i].as_slice().iter().map(|&v| g17(v)).collect();
        rec.push(if pool.labels()[i] { "1" } else { "0" }.into());
        if let Some(mu) = pool.predictor_scores() {
            rec.push(g17(mu[i]));
        }
        if let Some(g) = &data.groups {
            rec.push(g[i].clone());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_candidates<W: Write>(out: W, data: &CandidateData) -> csv::Result<()> {
    let batch = &data.batch;
    let mut w = csv::Writer::from_writer(out);
    let mut header = feature_header(batch.dimension());
    header.push("mu".into());
    if data.inputs.is_some() {
        header.push("input".into());
    }
    if data.labels.is_some() {
        header.push("y".into());
    }
    w.write_record(&header)?;
    for i in 0..batch.len() {
        let mut rec: Vec<String> = batch.features()[i].as_slice().iter().map(|&v| g17(v)).collect();
        rec.push(g17(batch.predictor_scores()[i]));
        if let Some(k) = &data.inputs {
            rec.push(k[i].clone());
        }
        if let Some(y) = &data.labels {
            rec.push(if y[i] { "1" } else { "0" }.into());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_weights<W: Write>(out: W, weights: &RowWeights) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["source", "index", "w"])?;
    for (source, ws) in [("calibration", &weights.calibration), ("candidate", &weights.candidates)] {
        for (i, &v) in ws.iter().enumerate() {
            w.write_record([source, &i.to_string(), &g17(v)])?;
        }
    }
    w.flush()?;
    Ok(())
}
