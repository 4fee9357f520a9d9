//! CSV tables whose rows carry the run id and the parameter tuple that produced them.

use std::fs::File;
use std::path::Path;

use anyhow::Result;
use spiked_core::ModelParams;

pub struct Table {
    w: csv::Writer<File>,
    prefix: Vec<String>,
}

/// Shortest representation that parses back to the same float, in exponent form when very
/// small or very large.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

impl Table {
    /// Header `run_id, p, delta2, deltap, columns…`.
    pub fn create(path: &Path, run_id: &str, params: &ModelParams, columns: &[&str]) -> Result<Table> {
        let prefix = vec![run_id.to_string(), params.p.to_string(), num(params.delta2), num(params.deltap)];
        Self::with_prefix(path, &["run_id", "p", "delta2", "deltap"], prefix, columns)
    }

    /// Header `run_id, columns…`, for tables whose rows carry their own parameters.
    pub fn bare(path: &Path, run_id: &str, columns: &[&str]) -> Result<Table> {
        Self::with_prefix(path, &["run_id"], vec![run_id.to_string()], columns)
    }

    fn with_prefix(path: &Path, names: &[&str], prefix: Vec<String>, columns: &[&str]) -> Result<Table> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(names.iter().chain(columns))?;
        Ok(Table { w, prefix })
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) -> Result<()> {
        self.w.write_record(self.prefix.iter().map(String::as_str).chain(fields.iter().map(AsRef::as_ref)))?;
        Ok(())
    }

    pub fn nums(&mut self, values: &[f64]) -> Result<()> {
        let fields: Vec<String> = values.iter().map(|&v| num(v)).collect();
        self.row(&fields)
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}
