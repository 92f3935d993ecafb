use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub method: String,
    pub regularizer: String,
    pub lambda: f64,
    pub p: Option<f64>,
    pub q: Option<f64>,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

/// Append-only table of experiment measurements plus the resolved
/// configuration that produced it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentReport {
    rows: Vec<ReportRow>,
    pub config: serde_json::Value,
}

impl ExperimentReport {
    pub fn new(config: serde_json::Value) -> Self {
        ExperimentReport { rows: Vec::new(), config }
    }

    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[ReportRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Values of rows matching every given filter, in insertion order.
    pub fn values(&self, method: &str, regularizer: &str, p: Option<f64>, metric: &str) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.regularizer == regularizer && r.metric == metric && (p.is_none() || r.p == p))
            .map(|r| (r.seed, r.value))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        if self.rows.is_empty() {
            w.write_record(["experiment", "method", "regularizer", "lambda", "p", "q", "seed", "metric", "value"])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let rows = r.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?;
        Ok(ExperimentReport {
            rows,
            config: serde_json::Value::Null,
        })
    }
}
