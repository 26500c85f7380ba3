// SPDX-License-Identifier: MIT OR Apache-2.0

//! Plain-text file formats.
//!
//! * Score matrix: one CSV row per model, T comma-separated decimals in
//!   `[0, 1]`. Optional `# model_id=<string>` lines name the rows in order;
//!   when present there must be exactly one per row.
//! * Labels: header `sequence_id,has_cp,theta,length`; `theta` is a 0-based
//!   index and empty when `has_cp` is 0.
//! * Series: T rows of D comma-separated decimals, no header.
//! * Trace: header `t,w_t`, 0-based `t`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{CpdError, Result};
use crate::score_model::{validate_matrix, EnsembleScoreMatrix, LabeledSequence};
use crate::synthgen::Series;

const MODEL_ID_PREFIX: &str = "# model_id=";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CpdError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CpdError::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| CpdError::io(path, e))
}

fn fmt_f64(v: f64) -> String {
    // shortest representation that round-trips
    format!("{v:?}")
}

pub fn parse_score_matrix(text: &str, origin: &Path) -> Result<EnsembleScoreMatrix> {
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(id) = line.strip_prefix(MODEL_ID_PREFIX) {
            ids.push(id.trim().to_string());
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let row_idx = rows.len();
        let row = line
            .split(',')
            .enumerate()
            .map(|(col, field)| {
                field.trim().parse::<f64>().map_err(|_| {
                    CpdError::parse(
                        origin,
                        format!(
                            "line {}: row {row_idx} col {col}: {:?} is not a number",
                            line_no + 1,
                            field.trim()
                        ),
                    )
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let matrix = validate_matrix(rows).map_err(|e| match e {
        CpdError::Domain(m) => CpdError::domain(format!("{}: {m}", origin.display())),
        CpdError::Shape(m) => CpdError::shape(format!("{}: {m}", origin.display())),
        other => other,
    })?;
    if ids.is_empty() {
        return Ok(matrix);
    }
    if ids.len() != matrix.n_models() {
        return Err(CpdError::parse(
            origin,
            format!(
                "{} model_id header lines for {} rows",
                ids.len(),
                matrix.n_models()
            ),
        ));
    }
    let (rows, _) = matrix.into_parts();
    EnsembleScoreMatrix::with_ids(rows, ids)
}

pub fn read_score_matrix(path: &Path) -> Result<EnsembleScoreMatrix> {
    parse_score_matrix(&read_text(path)?, path)
}

pub fn format_score_matrix(matrix: &EnsembleScoreMatrix) -> String {
    let mut out = String::new();
    for id in matrix.model_ids() {
        let _ = writeln!(out, "{MODEL_ID_PREFIX}{id}");
    }
    for row in matrix.rows() {
        let line: Vec<String> = row.as_slice().iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn write_score_matrix(path: &Path, matrix: &EnsembleScoreMatrix) -> Result<()> {
    write_text(path, &format_score_matrix(matrix))
}

/// One row of the labels file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRecord {
    pub sequence_id: String,
    pub label: LabeledSequence,
}

pub fn format_labels(records: &[LabelRecord]) -> String {
    let mut out = String::from("sequence_id,has_cp,theta,length\n");
    for r in records {
        let (has, theta) = match r.label.change_point() {
            Some(t) => (1, t.to_string()),
            None => (0, String::new()),
        };
        let _ = writeln!(out, "{},{has},{theta},{}", r.sequence_id, r.label.len());
    }
    out
}

pub fn parse_labels(text: &str, origin: &Path) -> Result<Vec<LabelRecord>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.replace(' ', "") == "sequence_id,has_cp,theta,length" => {}
        _ => {
            return Err(CpdError::parse(
                origin,
                "expected header `sequence_id,has_cp,theta,length`",
            ))
        }
    }
    let mut out = Vec::new();
    for (line_no, line) in lines {
        let bad = |msg: &str| CpdError::parse(origin, format!("line {}: {msg}", line_no + 1));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let length: usize = fields[3].parse().map_err(|_| bad("bad length"))?;
        let theta = match fields[1] {
            "0" => {
                if !fields[2].is_empty() {
                    return Err(bad("theta must be empty when has_cp=0"));
                }
                None
            }
            "1" => Some(fields[2].parse::<usize>().map_err(|_| bad("bad theta"))?),
            _ => return Err(bad("has_cp must be 0 or 1")),
        };
        let label = LabeledSequence::new(theta, length).map_err(|e| bad(&e.to_string()))?;
        out.push(LabelRecord {
            sequence_id: fields[0].to_string(),
            label,
        });
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    parse_labels(&read_text(path)?, path)
}

pub fn write_labels(path: &Path, records: &[LabelRecord]) -> Result<()> {
    write_text(path, &format_labels(records))
}

pub fn format_series(series: &Series) -> String {
    let mut out = String::new();
    for t in 0..series.len() {
        let line: Vec<String> = series.row(t).iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn read_series(path: &Path) -> Result<Series> {
    let text = read_text(path)?;
    let mut data = Vec::new();
    let mut dim = None;
    let mut len = 0;
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| CpdError::parse(path, format!("line {}: bad number", line_no + 1)))?;
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(CpdError::parse(
                    path,
                    format!("line {}: {} columns, expected {d}", line_no + 1, row.len()),
                ))
            }
            _ => {}
        }
        data.extend(row);
        len += 1;
    }
    let dim = dim.ok_or_else(|| CpdError::parse(path, "empty series file"))?;
    Series::new(data, len, dim)
}

pub fn write_series(path: &Path, series: &Series) -> Result<()> {
    write_text(path, &format_series(series))
}

pub fn format_trace(trace: &[f64]) -> String {
    let mut out = String::from("t,w_t\n");
    for (t, w) in trace.iter().enumerate() {
        let _ = writeln!(out, "{t},{}", fmt_f64(*w));
    }
    out
}

pub fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    write_text(path, &format_trace(trace))
}
