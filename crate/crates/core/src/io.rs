//! Table ingestion, covariate standardization and result writers.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::decision::DecisionSet;
use crate::error::{Error, Result};
use crate::model::HypothesisTable;

fn parse_error<T>(line: u64, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        line: line as usize,
        msg: msg.into(),
    })
}

fn sniff_delimiter(path: &Path) -> Result<u8> {
    let mut header = String::new();
    BufReader::new(File::open(path)?).read_line(&mut header)?;
    Ok(if header.contains('\t') || !header.contains(',') { b'\t' } else { b',' })
}

/// Reads `id, pvalue, covariate...` from a tab- or comma-delimited file
/// with a header row. The intercept column is prepended. A last column named
/// `truth`, as written by the simulator, is skipped.
pub fn read_table(path: impl AsRef<Path>) -> Result<HypothesisTable> {
    let path = path.as_ref();
    let delimiter = sniff_delimiter(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let width = headers.len();
    if width < 2 {
        return parse_error(1, "expected at least the columns id and pvalue");
    }
    let has_truth = width > 2 && headers.get(width - 1) == Some("truth");
    if has_truth {
        log::info!("ignoring the truth column of {}", path.display());
    }
    let d = width - 2 - usize::from(has_truth);

    let mut ids = Vec::new();
    let mut pvalues = Vec::new();
    let mut covariates = Vec::new();
    let mut seen = HashSet::new();
    let mut duplicates = 0usize;
    let mut record = csv::StringRecord::new();
    while reader.read_record(&mut record)? {
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return parse_error(line, format!("expected {width} fields, found {}", record.len()));
        }
        let id = &record[0];
        if id.is_empty() {
            return parse_error(line, "missing id");
        }
        let p = parse_number(&record[1], line, "pvalue")?;
        if !(0.0..=1.0).contains(&p) {
            return parse_error(line, format!("p-value {p} outside [0, 1]"));
        }
        for j in 0..d {
            let v = parse_number(&record[j + 2], line, "covariate")?;
            if !v.is_finite() {
                return parse_error(line, format!("non-finite covariate in column {}", j + 3));
            }
            covariates.push(v);
        }
        if !seen.insert(id.to_string()) {
            duplicates += 1;
        }
        ids.push(id.to_string());
        pvalues.push(p);
    }
    if ids.is_empty() {
        return Err(Error::EmptyTable);
    }
    if duplicates > 0 {
        log::warn!("{} duplicate id(s) in {}", duplicates, path.display());
    }
    let m = ids.len();
    let covariates = Array2::from_shape_vec((m, d), covariates).expect("row-major buffer of m * d values");
    HypothesisTable::new(ids, pvalues, &covariates)
}

fn parse_number(field: &str, line: u64, what: &str) -> Result<f64> {
    if field.is_empty() {
        return parse_error(line, format!("missing {what}"));
    }
    match field.parse::<f64>() {
        Ok(v) if !v.is_nan() => Ok(v),
        _ => parse_error(line, format!("cannot parse {what} '{field}'")),
    }
}

/// Median and robust scale applied to each covariate column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub centers: Vec<f64>,
    /// `IQR / 1.349`, or 1 for a column with zero IQR.
    pub scales: Vec<f64>,
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Centres every covariate at its median and divides by `IQR / 1.349`.
/// Columns with zero IQR are only centred; a constant column then becomes
/// exactly collinear with the intercept.
pub fn standardize_covariates(table: &HypothesisTable) -> Result<(HypothesisTable, Standardization)> {
    let mut design = table.design().clone();
    let mut centers = Vec::with_capacity(table.d());
    let mut scales = Vec::with_capacity(table.d());
    for j in 1..=table.d() {
        let mut col = design.column(j).to_vec();
        col.sort_by(f64::total_cmp);
        let center = quantile_sorted(&col, 0.5);
        let iqr = quantile_sorted(&col, 0.75) - quantile_sorted(&col, 0.25);
        let scale = if iqr > 0.0 {
            iqr / 1.349
        } else {
            if col[0] == col[col.len() - 1] {
                log::warn!("covariate x{j} is constant and collinear with the intercept");
            } else {
                log::warn!("covariate x{j} has zero interquartile range; centring only");
            }
            1.0
        };
        design.column_mut(j).mapv_inplace(|v| (v - center) / scale);
        centers.push(center);
        scales.push(scale);
    }
    let out = HypothesisTable::from_design(table.ids().to_vec(), table.pvalues().to_vec(), design)?;
    Ok((out, Standardization { centers, scales }))
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `id, pvalue, covariate...` as TSV; [`read_table`] restores the
/// values bit for bit. `extra` appends a named integer column.
pub fn write_table(path: impl AsRef<Path>, table: &HypothesisTable, extra: Option<(&str, &[bool])>) -> Result<()> {
    if let Some((_, col)) = extra {
        if col.len() != table.m() {
            return Err(Error::DimensionMismatch {
                expected: table.m(),
                got: col.len(),
            });
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "id\tpvalue")?;
    for j in 1..=table.d() {
        write!(w, "\tx{j}")?;
    }
    if let Some((name, _)) = extra {
        write!(w, "\t{name}")?;
    }
    writeln!(w)?;
    let design = table.design();
    let mut line = String::new();
    for i in 0..table.m() {
        line.clear();
        line.push_str(&table.ids()[i]);
        line.push('\t');
        line.push_str(&fmt_float(table.pvalues()[i]));
        for j in 1..=table.d() {
            line.push('\t');
            line.push_str(&fmt_float(design[[i, j]]));
        }
        if let Some((_, col)) = extra {
            line.push_str(if col[i] { "\t1" } else { "\t0" });
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the per-hypothesis decision table.
pub fn write_decisions(path: impl AsRef<Path>, table: &HypothesisTable, decisions: &DecisionSet) -> Result<()> {
    let m = table.m();
    for len in [
        decisions.pi_hat.len(),
        decisions.thresholds.len(),
        decisions.rejected.len(),
        decisions.weights.len(),
    ] {
        if len != m {
            return Err(Error::DimensionMismatch { expected: m, got: len });
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "id\tpvalue\tpi_hat\tweight\tthreshold\treject")?;
    for i in 0..m {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            table.ids()[i],
            fmt_float(table.pvalues()[i]),
            fmt_float(decisions.pi_hat[i]),
            fmt_float(decisions.weights[i]),
            fmt_float(decisions.thresholds[i]),
            u8::from(decisions.rejected[i]),
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Reads a `key = value` (or `key: value`) file; `#` starts a comment.
pub fn read_key_values(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some(pos) = line.find(['=', ':']) else {
            return parse_error(n as u64 + 1, format!("expected key = value, got '{line}'"));
        };
        let key = line[..pos].trim();
        if key.is_empty() {
            return parse_error(n as u64 + 1, "empty key");
        }
        out.push((key.to_string(), line[pos + 1..].trim().to_string()));
    }
    Ok(out)
}
