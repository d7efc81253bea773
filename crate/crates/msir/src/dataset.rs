//! Regression dataset: predictor matrix plus numeric or categorical response.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Response vector. Numeric responses can be sliced into intervals;
/// categorical responses always get one slice per label.
#[derive(Debug, Clone)]
pub enum Response {
    Numeric(Array1<f64>),
    Categorical(Vec<String>),
}

impl Response {
    pub fn len(&self) -> usize {
        match self {
            Response::Numeric(v) => v.len(),
            Response::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn distinct_count(&self) -> usize {
        match self {
            Response::Numeric(v) => {
                let mut sorted: Vec<f64> = v.to_vec();
                sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite response"));
                sorted.dedup();
                sorted.len()
            }
            Response::Categorical(v) => v.iter().collect::<BTreeSet<_>>().len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub predictors: Array2<f64>,
    pub response: Response,
    pub predictor_names: Vec<String>,
    pub response_name: String,
}

impl Dataset {
    pub fn new(predictors: Array2<f64>, response: Response) -> Result<Self> {
        if predictors.nrows() != response.len() {
            return Err(Error::DimensionMismatch {
                expected: predictors.nrows(),
                got: response.len(),
            });
        }
        if predictors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "predictor matrix".into(),
            });
        }
        let p = predictors.ncols();
        Ok(Self {
            predictors,
            response,
            predictor_names: (1..=p).map(|j| format!("x{j}")).collect(),
            response_name: "y".into(),
        })
    }

    pub fn n(&self) -> usize {
        self.predictors.nrows()
    }

    pub fn p(&self) -> usize {
        self.predictors.ncols()
    }
}

/// What to do when a parsed dataset has n <= p.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WidePolicy {
    /// Log a warning and continue (fine for projection input).
    #[default]
    Warn,
    /// Reject the file.
    Error,
}

#[derive(Debug, Clone, Default)]
pub struct CsvOptions {
    pub wide_policy: WidePolicy,
}

/// Read a headered CSV into a [`Dataset`].
///
/// `response_col` is matched against the header by name first, then treated
/// as a 0-based column index if it parses as an integer. Every remaining
/// column is a predictor and must be numeric; the first offending cell is
/// reported with its (1-based) data row and column name. The response is
/// numeric if every cell parses as a float, otherwise categorical.
pub fn parse_csv(path: &Path, response_col: &str, options: &CsvOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();

    let response_idx = match headers.iter().position(|h| h == response_col) {
        Some(i) => i,
        None => match response_col.parse::<usize>() {
            Ok(i) if i < headers.len() => i,
            _ => {
                return Err(Error::MissingColumn {
                    column: response_col.to_owned(),
                })
            }
        },
    };

    let predictor_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != response_idx)
        .map(|(_, h)| h.clone())
        .collect();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_response: Vec<String> = Vec::new();
    for (row_i, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::FitDocument(format!(
                "row {} has {} fields, header has {}",
                row_i + 1,
                record.len(),
                headers.len()
            )));
        }
        let mut row = Vec::with_capacity(headers.len() - 1);
        for (col_i, cell) in record.iter().enumerate() {
            if col_i == response_idx {
                raw_response.push(cell.to_owned());
                continue;
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    return Err(Error::NonNumericCell {
                        row: row_i + 1,
                        column: headers[col_i].clone(),
                        value: cell.to_owned(),
                    })
                }
            }
        }
        rows.push(row);
    }

    let n = rows.len();
    let p = headers.len() - 1;
    let mut predictors = Array2::zeros((n, p));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            predictors[[i, j]] = v;
        }
    }

    let numeric: Option<Vec<f64>> = raw_response
        .iter()
        .map(|s| s.parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect();
    let response = match numeric {
        Some(vals) => Response::Numeric(Array1::from_vec(vals)),
        None => Response::Categorical(raw_response),
    };

    if n <= p {
        match options.wide_policy {
            WidePolicy::Warn => log::warn!(
                "dataset has n={n} <= p={p}; covariance is singular, only projection-style use is safe"
            ),
            WidePolicy::Error => return Err(Error::TooFewObservations { n, p }),
        }
    }

    let mut ds = Dataset::new(predictors, response)?;
    ds.predictor_names = predictor_names;
    ds.response_name = headers[response_idx].clone();
    Ok(ds)
}

/// Read a headered CSV where every column is a numeric predictor.
///
/// Used for projection input that carries no response column.
pub fn parse_predictors_csv(path: &Path) -> Result<(Array2<f64>, Vec<String>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (row_i, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(headers.len());
        for (col_i, cell) in record.iter().enumerate() {
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    return Err(Error::NonNumericCell {
                        row: row_i + 1,
                        column: headers.get(col_i).cloned().unwrap_or_default(),
                        value: cell.to_owned(),
                    })
                }
            }
        }
        rows.push(row);
    }
    let n = rows.len();
    let p = headers.len();
    let mut x = Array2::zeros((n, p));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            x[[i, j]] = v;
        }
    }
    Ok((x, headers))
}
