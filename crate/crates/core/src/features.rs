//! Dense numeric feature tables keyed by record id.
//!
//! On disk: a CSV file whose header is `id,<name>,<name>,...` followed by one
//! row per record.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("header must start with an `id` column")]
    MissingIdColumn,
    #[error("row {row}: expected {expected} values, found {found}")]
    Width { row: usize, expected: usize, found: usize },
    #[error("row {row}, column {column:?}: {value:?} is not a finite number")]
    BadValue { row: usize, column: String, value: String },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    columns: Vec<String>,
    ids: Vec<String>,
    rows: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl FeatureTable {
    pub fn new(columns: Vec<String>, ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self, FeatureError> {
        let mut index = HashMap::with_capacity(ids.len());
        for (i, (id, row)) in ids.iter().zip(&rows).enumerate() {
            if row.len() != columns.len() {
                return Err(FeatureError::Width {
                    row: i + 1,
                    expected: columns.len(),
                    found: row.len(),
                });
            }
            if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                return Err(FeatureError::BadValue {
                    row: i + 1,
                    column: columns[c].clone(),
                    value: row[c].to_string(),
                });
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(FeatureError::DuplicateId(id.clone()));
            }
        }
        Ok(FeatureTable { columns, ids, rows, index })
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn row(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.rows[i].as_slice())
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self, FeatureError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.get(0).map(str::trim) != Some("id") {
            return Err(FeatureError::MissingIdColumn);
        }
        let columns: Vec<String> = header.iter().skip(1).map(|c| c.trim().to_owned()).collect();
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row_no = i + 1;
            if rec.len() != columns.len() + 1 {
                return Err(FeatureError::Width {
                    row: row_no,
                    expected: columns.len(),
                    found: rec.len().saturating_sub(1),
                });
            }
            ids.push(rec[0].to_owned());
            let mut row = Vec::with_capacity(columns.len());
            for (c, field) in rec.iter().skip(1).enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| FeatureError::BadValue {
                        row: row_no,
                        column: columns[c].clone(),
                        value: field.to_owned(),
                    })?;
                row.push(v);
            }
            rows.push(row);
        }
        FeatureTable::new(columns, ids, rows)
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn to_writer<W: Write>(&self, w: W) -> Result<(), FeatureError> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["id".to_owned()];
        header.extend(self.columns.iter().cloned());
        wtr.write_record(&header)?;
        for (id, row) in self.ids.iter().zip(&self.rows) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}
