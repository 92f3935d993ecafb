use std::collections::BTreeMap;
use std::io::Write;

use crate::checkpoint::{DeltaSet, Tensor};
use crate::error::{Error, Result};

/// Magnitude statistics of one tensor (or an aggregate row).
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaStatsRow {
    pub layer: String,
    pub mean_abs_dw: f64,
    pub mean_abs_dwx: f64,
    pub var_dw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaStatsReport {
    pub rows: Vec<DeltaStatsRow>,
}

impl DeltaStatsReport {
    pub fn row(&self, layer: &str) -> Option<&DeltaStatsRow> {
        self.rows.iter().find(|r| r.layer == layer)
    }

    /// CSV with columns `layer, mean_abs_dw, mean_abs_dwx, var_dw`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "mean_abs_dw", "mean_abs_dwx", "var_dw"])?;
        for r in &self.rows {
            w.write_record([
                r.layer.clone(),
                r.mean_abs_dw.to_string(),
                r.mean_abs_dwx.to_string(),
                r.var_dw.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Default, Clone, Copy)]
struct Acc {
    n: f64,
    sum_abs: f64,
    sum: f64,
    sum_sq: f64,
    n_x: f64,
    sum_abs_x: f64,
}

impl Acc {
    fn merge(&mut self, o: &Acc) {
        self.n += o.n;
        self.sum_abs += o.sum_abs;
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
        self.n_x += o.n_x;
        self.sum_abs_x += o.sum_abs_x;
    }

    fn row(&self, layer: String) -> DeltaStatsRow {
        let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        let mean = div(self.sum, self.n);
        DeltaStatsRow {
            layer,
            mean_abs_dw: div(self.sum_abs, self.n),
            mean_abs_dwx: div(self.sum_abs_x, self.n_x),
            var_dw: (div(self.sum_sq, self.n) - mean * mean).max(0.0),
        }
    }
}

/// Per-tensor and pooled `mean|dW_ij|`, `mean|dW_ij x_j|` and `var(dW_ij)`.
///
/// `activations` maps each 2-D tensor name to a batch of its inputs. 1-D
/// tensors (biases, gains) use `x = 1`. Besides one row per tensor the report
/// holds `global`, `global:matrix` and `global:vector` rows.
pub fn delta_stats(delta: &DeltaSet, activations: &BTreeMap<String, Vec<Vec<f32>>>) -> Result<DeltaStatsReport> {
    let mut rows = Vec::new();
    let (mut all, mut mats, mut vecs) = (Acc::default(), Acc::default(), Acc::default());
    for (name, t) in delta.entries() {
        let mut acc = Acc::default();
        for &v in t.values() {
            let v = v as f64;
            acc.n += 1.0;
            acc.sum_abs += v.abs();
            acc.sum += v;
            acc.sum_sq += v * v;
        }
        match t {
            Tensor::Matrix(m) => {
                let batch = activations
                    .get(name)
                    .ok_or_else(|| Error::Precondition(format!("no activations for `{name}`")))?;
                for x in batch {
                    if x.len() != m.cols() {
                        return Err(Error::dim(format!(
                            "`{name}` has {} inputs, activation has {}",
                            m.cols(),
                            x.len()
                        )));
                    }
                    for i in 0..m.rows() {
                        for (w, &xj) in m.row(i).iter().zip(x) {
                            acc.sum_abs_x += (*w as f64 * xj as f64).abs();
                        }
                    }
                    acc.n_x += m.len() as f64;
                }
                mats.merge(&acc);
            }
            Tensor::Vector(_) => {
                acc.sum_abs_x = acc.sum_abs;
                acc.n_x = acc.n;
                vecs.merge(&acc);
            }
        }
        all.merge(&acc);
        rows.push(acc.row(name.clone()));
    }
    rows.push(all.row("global".into()));
    rows.push(mats.row("global:matrix".into()));
    rows.push(vecs.row("global:vector".into()));
    Ok(DeltaStatsReport { rows })
}
