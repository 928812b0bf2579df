use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// A `T x D` numeric series, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub frequency: String,
    values: Vec<f64>,
    rows: usize,
    cols: usize,
    pub timestamps: Option<Vec<String>>,
    pub column_names: Option<Vec<String>>,
    /// Rows dropped at load time because a field was missing or NaN.
    pub rejected_rows: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() || cols == 0 {
            return Err(Error::Data(format!(
                "{} values do not fill a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at row {}", i / cols)));
        }
        Ok(Self {
            name: name.into(),
            frequency: String::new(),
            values,
            rows,
            cols,
            timestamps: None,
            column_names: None,
            rejected_rows: 0,
        })
    }

    /// Single-channel dataset.
    pub fn univariate(name: impl Into<String>, series: Vec<f64>) -> Result<Self> {
        let n = series.len();
        Self::new(name, n, 1, series)
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn channels(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, row: usize, channel: usize) -> f64 {
        self.values[row * self.cols + channel]
    }

    /// Copy of one channel over a row range.
    pub fn channel(&self, channel: usize, rows: std::ops::Range<usize>) -> Vec<f64> {
        rows.map(|r| self.value(r, channel)).collect()
    }

    /// Writes a header row and one line per step, with timestamps first when present.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = Vec::new();
        if self.timestamps.is_some() {
            header.push("date".to_string());
        }
        match &self.column_names {
            Some(names) => header.extend(names.iter().cloned()),
            None => header.extend((0..self.cols).map(|c| format!("c{c}"))),
        }
        w.write_record(&header).map_err(csv_err)?;
        for r in 0..self.rows {
            let mut rec = Vec::with_capacity(self.cols + 1);
            if let Some(ts) = &self.timestamps {
                rec.push(ts[r].clone());
            }
            rec.extend((0..self.cols).map(|c| format!("{:?}", self.value(r, c))));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let mut inner = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        inner.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}

fn is_missing(field: &str) -> bool {
    let f = field.trim();
    f.is_empty() || f.eq_ignore_ascii_case("nan") || f.eq_ignore_ascii_case("na")
}

fn parse(field: &str) -> Option<f64> {
    field.trim().parse::<f64>().ok()
}

/// Reads a comma-separated numeric table. A first row containing any
/// non-numeric field is a header; a non-numeric first column is a timestamp.
/// Rows with a missing or NaN field are dropped and counted.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);

    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        records.push((line, rec));
    }
    if records.is_empty() {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }

    let non_numeric = |s: &str| !is_missing(s) && parse(s).is_none();
    let first = &records[0].1;
    let has_timestamp = {
        let probe = if records.len() > 1 { &records[1].1 } else { first };
        non_numeric(&probe[0])
    };
    let skip = usize::from(has_timestamp);
    let has_header = first.iter().skip(skip).any(non_numeric);
    let width = first.len();
    if width <= skip {
        return Err(Error::Data(format!("{}: no numeric columns", path.display())));
    }
    let cols = width - skip;
    let column_names = has_header.then(|| first.iter().skip(skip).map(str::to_string).collect());

    let mut values = Vec::new();
    let mut stamps = Vec::new();
    let mut rejected = 0;
    for (line, rec) in records.iter().skip(usize::from(has_header)) {
        if rec.len() != width {
            return Err(Error::Data(format!(
                "{}: line {line} has {} fields, expected {width}",
                path.display(),
                rec.len()
            )));
        }
        if rec.iter().skip(skip).any(is_missing) {
            rejected += 1;
            continue;
        }
        let start = values.len();
        for f in rec.iter().skip(skip) {
            match parse(f) {
                Some(v) if v.is_finite() => values.push(v),
                Some(_) => break,
                None => {
                    return Err(Error::Data(format!(
                        "{}: line {line}: '{f}' is not a number",
                        path.display()
                    )))
                }
            }
        }
        if values.len() - start != cols {
            values.truncate(start);
            rejected += 1;
            continue;
        }
        if has_timestamp {
            stamps.push(rec[0].to_string());
        }
    }
    let rows = values.len() / cols;
    if rows == 0 {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut ds = Dataset::new(name, rows, cols, values)?;
    ds.timestamps = has_timestamp.then_some(stamps);
    ds.column_names = column_names;
    ds.rejected_rows = rejected;
    Ok(ds)
}
