//! Tables, number formatting and sidecar reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::CliError;

/// Formats with 12 significant digits, switching to exponent form outside
/// `[1e-5, 1e12)`.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let t = s.trim_end_matches('0').trim_end_matches('.');
    if t == "-0" { "0".into() } else { t.into() }
}

/// Encoding of the primary output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// A numeric table with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn with_header(header: Vec<String>) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| fmt_num(*v)).collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        s
    }

    pub fn to_json(&self) -> Value {
        let rows = self
            .rows
            .iter()
            .map(|row| {
                let obj: Map<String, Value> = self
                    .header
                    .iter()
                    .zip(row)
                    .map(|(h, v)| (h.clone(), number(*v)))
                    .collect();
                Value::Object(obj)
            })
            .collect();
        Value::Array(rows)
    }
}

/// JSON number, with non-finite values spelled out.
pub fn number(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(fmt_num(v))
    }
}

/// Solver diagnostics collected row by row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolverLog {
    pub residuals: Vec<f64>,
    pub iterations: Vec<usize>,
}

impl SolverLog {
    pub fn record(&mut self, residual: f64, iterations: usize) {
        self.residuals.push(residual);
        self.iterations.push(iterations);
    }

    pub fn to_json(&self) -> Value {
        let max_residual = self.residuals.iter().cloned().fold(0.0, f64::max);
        json!({
            "max_residual": number(max_residual),
            "max_iterations": self.iterations.iter().copied().max().unwrap_or(0),
            "residuals": self.residuals.iter().map(|v| number(*v)).collect::<Vec<_>>(),
            "iterations": self.iterations,
        })
    }
}

/// `out.csv` -> `out.meta.json`.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    out.with_file_name(format!("{stem}.meta.json"))
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

pub fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values always serialise");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(fmt_num(0.30423551925046655), "0.30423551925");
        assert_eq!(fmt_num(1.0), "1");
        assert_eq!(fmt_num(-2.5), "-2.5");
        assert_eq!(fmt_num(123456.7890123456), "123456.789012");
        assert_eq!(fmt_num(1.5e-7), "1.5e-7");
        assert_eq!(fmt_num(-1e-300), "-1e-300");
        assert_eq!(fmt_num(2.0e15), "2e15");
        assert_eq!(fmt_num(f64::INFINITY), "inf");
        assert_eq!(fmt_num(-1e-20 * 0.0), "0");
    }

    #[test]
    fn rounding_that_carries_into_the_next_decade() {
        assert_eq!(fmt_num(9.9999999999999e-6), "0.00001");
        assert_eq!(fmt_num(0.99999999999999), "1");
    }

    #[test]
    fn csv_layout() {
        let mut t = Table::new(&["k", "p"]);
        t.push(vec![-1.0, 0.25]);
        assert_eq!(t.to_csv(), "k,p\n-1,0.25\n");
        assert_eq!(t.column("p"), Some(vec![0.25]));
    }
}
