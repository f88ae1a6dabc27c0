//! Column-named data table read from CSV. Every cell keeps its text; numeric
//! views are parsed on demand so the same column can serve as a label or a
//! covariate.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataTable {
    names: Vec<String>,
    columns: Vec<Vec<String>>,
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "NA"
}

impl DataTable {
    pub fn from_columns(columns: Vec<(String, Vec<String>)>) -> Result<Self> {
        let n = columns.first().map_or(0, |c| c.1.len());
        let mut table = DataTable::default();
        for (name, values) in columns {
            if values.len() != n {
                return Err(Error::Data(format!("column '{name}' has {} rows, expected {n}", values.len())));
            }
            if table.names.contains(&name) {
                return Err(Error::Data(format!("duplicate column '{name}'")));
            }
            table.names.push(name);
            table.columns.push(values);
        }
        Ok(table)
    }

    pub fn from_numeric(columns: &[(&str, &[f64])]) -> Result<Self> {
        Self::from_columns(
            columns
                .iter()
                .map(|(name, v)| (name.to_string(), v.iter().map(|x| format_number(*x)).collect()))
                .collect(),
        )
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let names: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let mut columns = vec![Vec::new(); names.len()];
        for record in rdr.records() {
            let record = record?;
            for (col, cell) in columns.iter_mut().zip(record.iter()) {
                col.push(cell.to_string());
            }
        }
        Self::from_columns(names.into_iter().zip(columns).collect())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_reader(file)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.names)?;
        for i in 0..self.n_rows() {
            w.write_record(self.columns.iter().map(|c| c[i].as_str()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn text(&self, name: &str) -> Result<&[String]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| Error::Data(format!("unknown column '{name}'")))
    }

    /// Parses a column as numbers; missing or non-numeric cells are errors.
    pub fn numeric(&self, name: &str) -> Result<Vec<f64>> {
        self.text(name)?
            .iter()
            .enumerate()
            .map(|(i, cell)| {
                if is_missing(cell) {
                    return Err(Error::Data(format!("column '{name}' row {} is missing", i + 1)));
                }
                cell.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("column '{name}' row {} is not numeric: '{cell}'", i + 1)))
            })
            .collect()
    }

    /// Text cells with missing values rejected.
    pub fn labels(&self, name: &str) -> Result<Vec<String>> {
        self.text(name)?
            .iter()
            .enumerate()
            .map(|(i, cell)| {
                if is_missing(cell) {
                    Err(Error::Data(format!("column '{name}' row {} is missing", i + 1)))
                } else {
                    Ok(cell.trim().to_string())
                }
            })
            .collect()
    }

    pub fn push_column(&mut self, name: &str, values: Vec<String>) -> Result<()> {
        if !self.names.is_empty() && values.len() != self.n_rows() {
            return Err(Error::Data(format!("column '{name}' has wrong length")));
        }
        if self.has_column(name) {
            return Err(Error::Data(format!("duplicate column '{name}'")));
        }
        self.names.push(name.to_string());
        self.columns.push(values);
        Ok(())
    }

    pub fn select_rows(&self, rows: &[usize]) -> DataTable {
        DataTable {
            names: self.names.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&r| c[r].clone()).collect())
                .collect(),
        }
    }
}

/// Shortest text that parses back to the same `f64`.
pub fn format_number(x: f64) -> String {
    if x.is_nan() {
        "NA".to_string()
    } else {
        format!("{x}")
    }
}
