//! CSV datasets: a header row, a 0/1 column `T`, a numeric column `Y`, and
//! numeric covariates in every other column.

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use hdcbps::Dataset;
use ndarray::Array2;

use crate::error::CliError;

pub fn ingest_csv(path: &Path) -> Result<Dataset, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    ingest_reader(file)
}

pub fn ingest_reader<R: Read>(reader: R) -> Result<Dataset, CliError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::Schema(format!("unreadable header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut seen = HashSet::new();
    for name in &header {
        if !seen.insert(name.as_str()) {
            return Err(CliError::Schema(format!("duplicate column name '{name}'")));
        }
    }
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Schema(format!("missing required column '{name}'")))
    };
    let (t_col, y_col) = (find("T")?, find("Y")?);
    let covariates: Vec<usize> = (0..header.len()).filter(|&c| c != t_col && c != y_col).collect();

    let mut t = Vec::new();
    let mut y = Vec::new();
    let mut x = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| CliError::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(CliError::Parse {
                row,
                column: String::new(),
                message: format!("{} fields, header has {}", record.len(), header.len()),
            });
        }
        let cell = |c: usize| -> Result<f64, CliError> {
            let raw = &record[c];
            let fail = |message: String| CliError::Parse {
                row,
                column: header[c].clone(),
                message,
            };
            if raw.is_empty() {
                return Err(fail("missing value".into()));
            }
            let v: f64 = raw.parse().map_err(|_| fail(format!("'{raw}' is not a number")))?;
            if !v.is_finite() {
                return Err(fail(format!("'{raw}' is not finite")));
            }
            Ok(v)
        };
        let tv = cell(t_col)?;
        if tv != 0.0 && tv != 1.0 {
            return Err(CliError::Parse {
                row,
                column: "T".into(),
                message: format!("treatment {tv} is not 0 or 1"),
            });
        }
        t.push(tv);
        y.push(cell(y_col)?);
        for &c in &covariates {
            x.push(cell(c)?);
        }
    }
    if t.is_empty() {
        return Err(CliError::Schema("no data rows".into()));
    }
    let n = t.len();
    let x = Array2::from_shape_vec((n, covariates.len()), x).expect("row-major covariate buffer");
    let names = covariates.iter().map(|&c| header[c].clone()).collect();
    Ok(Dataset::from_covariates(&x, t, y, names)?)
}

/// Writes a dataset in the layout [`ingest_csv`] reads. Numbers use the
/// shortest representation that parses back to the same `f64`.
pub fn write_csv<W: Write>(data: &Dataset, out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| CliError::Schema(format!("cannot write dataset: {e}"));
    let mut header = vec!["T".to_string(), "Y".to_string()];
    header.extend(data.names()[1..].iter().cloned());
    w.write_record(&header).map_err(io)?;
    for i in 0..data.n() {
        let mut rec = vec![data.t()[i].to_string(), data.y()[i].to_string()];
        rec.extend(data.row(i).iter().skip(1).map(|v| v.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Schema(format!("cannot write dataset: {e}")))?;
    Ok(())
}
