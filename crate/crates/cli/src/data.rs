//! CSV ingestion.
//!
//! A file has one header row, an optional leading date column and numeric
//! columns after it. Dates are accepted as `YYYY-MM`, `YYYY-MM-DD` (with an
//! optional time part) or `YYYY:MM`; they only identify rows and are dropped.

use csv::{ReaderBuilder, StringRecord, Trim};
use nalgebra::DMatrix;
use sparsecoint::TimeSeriesMatrix;
use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::Path;

/// A malformed input file, located by 1-based line and, for cell errors, the
/// column header.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseError {
    pub source: String,
    pub line: u64,
    pub column: Option<String>,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: line {}", self.source, self.line)?;
        if let Some(c) = &self.column {
            write!(f, ", column '{c}'")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for ParseError {}

/// Reads a dataset from `path`.
pub fn parse_csv(path: &Path) -> Result<TimeSeriesMatrix, crate::CliError> {
    let file = File::open(path).map_err(|e| crate::CliError::io(path, e))?;
    Ok(parse_csv_reader(file, &path.display().to_string())?)
}

/// Reads a dataset from any reader; `source` names it in error messages.
pub fn parse_csv_reader<R: Read>(reader: R, source: &str) -> Result<TimeSeriesMatrix, ParseError> {
    let err = |line: u64, column: Option<&str>, message: String| ParseError {
        source: source.to_string(),
        line,
        column: column.map(str::to_string),
        message,
    };
    let mut rdr = ReaderBuilder::new()
        .flexible(true)
        .trim(Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| err(error_line(&e).unwrap_or(1), None, e.to_string()))?
        .clone();
    if header.iter().all(str::is_empty) {
        return Err(err(1, None, "missing header row".into()));
    }

    let mut records: Vec<(u64, StringRecord)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(error_line(&e).unwrap_or(0), None, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != header.len() {
            return Err(err(
                line,
                None,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        records.push((line, rec));
    }
    if records.len() < 2 {
        return Err(err(
            records.first().map_or(1, |r| r.0),
            None,
            format!("need at least 2 observations, found {}", records.len()),
        ));
    }

    let has_date = is_date_header(&header[0]) || is_date(&records[0].1[0]);
    let first = usize::from(has_date);
    let labels: Vec<String> = header.iter().skip(first).map(str::to_string).collect();
    if labels.is_empty() {
        return Err(err(1, None, "no numeric columns after the date column".into()));
    }
    if let Some(j) = labels.iter().position(|l| l.is_empty()) {
        return Err(err(1, None, format!("column {} has an empty name", j + first + 1)));
    }

    let (n, q) = (records.len(), labels.len());
    let mut values = DMatrix::zeros(n, q);
    for (i, (line, rec)) in records.iter().enumerate() {
        if has_date && !is_date(&rec[0]) {
            return Err(err(*line, Some(&header[0]), format!("'{}' is not a date", &rec[0])));
        }
        for (j, label) in labels.iter().enumerate() {
            let cell = &rec[j + first];
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => values[(i, j)] = v,
                _ => {
                    return Err(err(
                        *line,
                        Some(label),
                        format!("'{cell}' is not a finite number"),
                    ))
                }
            }
        }
    }
    TimeSeriesMatrix::new(values, Some(labels)).map_err(|e| err(1, None, e.to_string()))
}

fn error_line(e: &csv::Error) -> Option<u64> {
    match e.kind() {
        csv::ErrorKind::Utf8 { pos, .. } | csv::ErrorKind::UnequalLengths { pos, .. } => {
            pos.as_ref().map(|p| p.line())
        }
        _ => e.position().map(|p| p.line()),
    }
}

fn is_date_header(name: &str) -> bool {
    matches!(
        name.to_ascii_lowercase().as_str(),
        "date" | "time" | "month" | "period" | "observation_date"
    )
}

/// `YYYY-MM`, `YYYY-MM-DD[Thh:mm[:ss]]` or `YYYY:MM`.
fn is_date(cell: &str) -> bool {
    let date = cell.split(['T', ' ']).next().unwrap_or_default();
    let two = |s: &str, hi: u32| s.len() == 2 && s.parse::<u32>().is_ok_and(|v| (1..=hi).contains(&v));
    let year = |s: &str| s.len() == 4 && s.bytes().all(|b| b.is_ascii_digit());
    if date.len() != cell.len() && date.len() != 10 {
        return false;
    }
    if let Some((y, m)) = date.split_once(':') {
        return year(y) && two(m, 12);
    }
    let parts: Vec<&str> = date.split('-').collect();
    match parts.as_slice() {
        [y, m] => year(y) && two(m, 12),
        [y, m, d] => year(y) && two(m, 12) && two(d, 31),
        _ => false,
    }
}
