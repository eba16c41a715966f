//! Coefficient tables as CSV or JSON.
//!
//! Numbers are written with a fixed number of decimals so repeated runs
//! produce identical bytes.

use std::io::Write;

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::Result;
use crate::regression::RegressionFit;

/// Decimal places in every written number.
pub const DECIMALS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientRow {
    pub term: String,
    pub estimate: f64,
    pub std_error: f64,
    pub group: String,
    pub relative_time: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientTable {
    pub rows: Vec<CoefficientRow>,
    pub vcov: Vec<Vec<f64>>,
    pub vcov_label: String,
    pub n: usize,
    pub dof: usize,
    pub clipped: bool,
    pub warnings: Vec<String>,
    pub notes: Vec<String>,
}

impl CoefficientTable {
    pub fn from_fit(fit: &RegressionFit) -> Self {
        let se = fit.std_errors();
        let rows = fit
            .terms
            .iter()
            .zip(&fit.coefficients)
            .zip(se)
            .map(|((t, &b), s)| CoefficientRow {
                term: t.name.clone(),
                estimate: b,
                std_error: s,
                group: t.group.clone(),
                relative_time: t.relative_time,
            })
            .collect();
        Self {
            rows,
            vcov: fit.vcov.clone(),
            vcov_label: fit.vcov_spec.label(),
            n: fit.n,
            dof: fit.dof,
            clipped: fit.clipped,
            warnings: fit.warnings.clone(),
            notes: fit.notes.clone(),
        }
    }

    /// Replaces the covariance (and standard errors), e.g. with a bootstrap one.
    pub fn with_vcov(mut self, vcov: Vec<Vec<f64>>, label: impl Into<String>) -> Self {
        for (j, row) in self.rows.iter_mut().enumerate() {
            row.std_error = vcov[j][j].max(0.0).sqrt();
        }
        self.vcov = vcov;
        self.vcov_label = label.into();
        self.clipped = false;
        self
    }

    /// Appends a row that has no covariance entry (a derived quantity).
    pub fn push_derived(&mut self, row: CoefficientRow) {
        let k = self.vcov.len();
        for r in &mut self.vcov {
            r.push(f64::NAN);
        }
        let mut last = vec![f64::NAN; k + 1];
        last[k] = row.std_error * row.std_error;
        self.vcov.push(last);
        self.rows.push(row);
    }

    pub fn row(&self, term: &str) -> Option<&CoefficientRow> {
        self.rows.iter().find(|r| r.term == term)
    }

    /// `term,estimate,std_error,group,relative_time`; the covariance is omitted.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["term", "estimate", "std_error", "group", "relative_time"])?;
        for r in &self.rows {
            w.write_record([
                r.term.clone(),
                fixed(r.estimate),
                fixed(r.std_error),
                r.group.clone(),
                r.relative_time.map(|k| k.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                json!({
                    "term": r.term,
                    "estimate": number(r.estimate),
                    "std_error": number(r.std_error),
                    "group": r.group,
                    "relative_time": r.relative_time,
                })
            })
            .collect();
        let vcov: Vec<Vec<Value>> = self
            .vcov
            .iter()
            .map(|row| row.iter().map(|&v| number(v)).collect())
            .collect();
        json!({
            "coefficients": rows,
            "vcov": {
                "type": self.vcov_label,
                "terms": self.rows.iter().map(|r| r.term.as_str()).collect::<Vec<_>>(),
                "matrix": vcov,
                "clipped": self.clipped,
            },
            "n": self.n,
            "dof": self.dof,
            "warnings": self.warnings,
            "notes": self.notes,
        })
    }

    pub fn write_json<W: Write>(&self, mut sink: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut sink, &self.to_json())?;
        sink.write_all(b"\n")?;
        Ok(())
    }
}

/// Fixed-decimal text; `NaN` and infinities are written as `NA`.
pub fn fixed(v: f64) -> String {
    if !v.is_finite() {
        return "NA".into();
    }
    let s = format!("{v:.DECIMALS$}");
    // Avoid "-0.00000000".
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

/// JSON number carrying exactly the fixed-decimal digits, or `null`.
pub fn number(v: f64) -> Value {
    if !v.is_finite() {
        return Value::Null;
    }
    serde_json::from_str(&fixed(v)).unwrap_or(Value::Null)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_formatting() {
        assert_eq!(fixed(1.0), "1.00000000");
        assert_eq!(fixed(-1e-12), "0.00000000");
        assert_eq!(fixed(f64::NAN), "NA");
        assert_eq!(fixed(-0.123456789), "-0.12345679");
    }

    #[test]
    fn json_numbers_keep_digits() {
        assert_eq!(number(0.5).to_string(), "0.5");
        assert_eq!(number(f64::INFINITY), Value::Null);
    }
}
