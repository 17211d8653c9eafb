//! CSV emission: `#` metadata block, header row, data rows.

use crate::error::Result;

/// Shortest round-trip decimal form of an `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// Renders the metadata lines (each prefixed with `# `) followed by the CSV body.
    pub fn render(&self, metadata: &[(String, String)]) -> Result<String> {
        let mut out = String::new();
        for (k, v) in metadata {
            out.push_str(&format!("# {k}: {v}\n"));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        let body = w.into_inner().map_err(|e| e.into_error())?;
        out.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
        Ok(out)
    }
}

/// `(mean, standard error)`; the standard error is NaN below two samples.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}
