//! Choosing the rescale divisor `q` for drop-and-rescale pruning.
//!
//! The global search scans `q_t = 1 - p + t dq` under one fixed mask and keeps
//! the best objective. The per-layer search picks one `q` per weight matrix by
//! minimizing the analytic `q(eta)` objective, then scans `eta`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{apply_delta, DeltaSet, ModelCheckpoint, QValue, Tensor};
use crate::error::{Error, Result};
use crate::pruners::drop_rescale;
use crate::theory::{influence_stats_batch, q_eta_minimize, q_grid, InfluenceStats, DEFAULT_GAMMA, Q_GRID_MAX};

/// A model that can be rebuilt from a checkpoint and run forward.
pub trait Network: Sized {
    fn from_checkpoint(c: &ModelCheckpoint) -> Result<Self>;

    /// Last-layer outputs for one input.
    fn outputs(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Input seen by each weight matrix, in checkpoint order.
    fn weight_inputs(&self, x: &[f64]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Misclassification rate on labeled data.
    Validation,
    /// Mean absolute last-layer output change against the fine-tuned model.
    Outdiff,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" | "validation" => Ok(Objective::Validation),
            "outdiff" => Ok(Objective::Outdiff),
            other => Err(Error::Usage(format!("unknown objective `{other}`"))),
        }
    }
}

/// Inputs for the objective; labels are required by `Validation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn unlabeled(inputs: Vec<Vec<f64>>) -> Self {
        Batch { inputs, labels: None }
    }

    pub fn labeled(inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> Self {
        Batch {
            inputs,
            labels: Some(labels),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub p: f64,
    pub dq: f64,
    pub rounds: usize,
    pub objective: Objective,
    pub gamma: f64,
    pub seed: u64,
}

/// Default grid: `dq = (1-p)/2` and up to 40 rounds, kept within `q <= 2`.
pub fn default_q_grid(p: f64) -> (f64, usize) {
    let dq = (1.0 - p) / 2.0;
    let mut rounds = (((Q_GRID_MAX - (1.0 - p)) / dq).floor() as usize).clamp(1, 40);
    while rounds > 1 && 1.0 - p + rounds as f64 * dq > Q_GRID_MAX {
        rounds -= 1;
    }
    (dq, rounds)
}

impl SearchConfig {
    pub fn new(p: f64, objective: Objective, seed: u64) -> Self {
        let (dq, rounds) = default_q_grid(p);
        SearchConfig {
            p,
            dq,
            rounds,
            objective,
            gamma: DEFAULT_GAMMA,
            seed,
        }
    }

    pub fn grid(&self) -> Result<Vec<f64>> {
        q_grid(self.p, self.dq, self.rounds)
    }
}

/// `eta` values scanned by the per-layer search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EtaGrid {
    /// `eta_t = t * deta`.
    Linear { deta: f64, rounds: usize },
    /// `rounds` log-spaced values from `min` to `max`.
    Log { min: f64, max: f64, rounds: usize },
}

impl Default for EtaGrid {
    fn default() -> Self {
        EtaGrid::Log {
            min: 1e-3,
            max: 1e2,
            rounds: 20,
        }
    }
}

impl EtaGrid {
    pub fn values(&self) -> Result<Vec<f64>> {
        match *self {
            EtaGrid::Linear { deta, rounds } => {
                if !(deta > 0.0 && deta.is_finite()) {
                    return Err(Error::domain(format!("eta step must be > 0, got {deta}")));
                }
                if rounds == 0 {
                    return Err(Error::Empty("eta grid".into()));
                }
                Ok((1..=rounds).map(|t| t as f64 * deta).collect())
            }
            EtaGrid::Log { min, max, rounds } => {
                if !(min > 0.0 && max >= min && max.is_finite()) {
                    return Err(Error::domain(format!("log eta grid needs 0 < min <= max, got {min}..{max}")));
                }
                if rounds == 0 {
                    return Err(Error::Empty("eta grid".into()));
                }
                if rounds == 1 {
                    return Ok(vec![min]);
                }
                let (a, b) = (min.ln(), max.ln());
                Ok((0..rounds)
                    .map(|t| (a + (b - a) * t as f64 / (rounds - 1) as f64).exp())
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerLayerConfig {
    /// Drop rate, q grid, objective, gamma and mask seed.
    pub search: SearchConfig,
    pub eta: EtaGrid,
    /// Skip the last `eta` when updating the best, as the reference
    /// procedure does. Ignored when there is a single `eta`.
    pub exclude_last: bool,
}

impl PerLayerConfig {
    pub fn new(p: f64, objective: Objective, seed: u64) -> Self {
        PerLayerConfig {
            search: SearchConfig::new(p, objective, seed),
            eta: EtaGrid::default(),
            exclude_last: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub q_layers: Option<Vec<f64>>,
    pub objective: f64,
}

/// Selected `q` (scalar or per weight matrix) with the full search trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QSelection {
    pub q: QValue,
    pub objective: f64,
    pub objective_kind: Objective,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eta: Option<f64>,
    pub trace: Vec<TracePoint>,
}

impl QSelection {
    /// CSV with columns `t, q, objective` (global) or `t, eta, objective`.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let per_layer = matches!(self.q, QValue::PerLayer(_));
        w.write_record(["t", if per_layer { "eta" } else { "q" }, "objective"])?;
        for p in &self.trace {
            let x = if per_layer { p.eta } else { p.q }.unwrap_or(f64::NAN);
            w.write_record([p.t.to_string(), x.to_string(), p.objective.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Misclassification rate of `model` on a labeled batch.
pub fn objective_validation<N: Network>(model: &N, inputs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::Empty("validation batch".into()));
    }
    if inputs.len() != labels.len() {
        return Err(Error::dim(format!("{} inputs, {} labels", inputs.len(), labels.len())));
    }
    let mut wrong = 0usize;
    for (x, &y) in inputs.iter().zip(labels) {
        if crate::harness::argmax(&model.outputs(x)?) != y {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / inputs.len() as f64)
}

fn outputs_of<N: Network>(model: &N, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    inputs.iter().map(|x| model.outputs(x)).collect()
}

fn mean_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (u, v) in a.iter().zip(b) {
        if u.len() != v.len() {
            return Err(Error::IncompatibleCheckpoints(format!("{} vs {} outputs", u.len(), v.len())));
        }
        total += u.iter().zip(v).map(|(x, y)| (x - y).abs()).sum::<f64>();
        count += u.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Mean over batch and output neurons of `|pruned(x) - fine(x)|`.
pub fn objective_outdiff<N: Network>(pruned: &N, fine: &N, inputs: &[Vec<f64>]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::Empty("output-difference batch".into()));
    }
    mean_abs_diff(&outputs_of(pruned, inputs)?, &outputs_of(fine, inputs)?)
}

/// Evaluates one candidate: prune with the search's fixed mask, rescale by
/// `1/q`, add to `base`, score.
struct Evaluator<'a> {
    base: &'a ModelCheckpoint,
    delta: &'a DeltaSet,
    p: f64,
    seed: u64,
    data: &'a Batch,
    fine_outputs: Option<Vec<Vec<f64>>>,
}

impl<'a> Evaluator<'a> {
    fn new<N: Network>(base: &'a ModelCheckpoint, delta: &'a DeltaSet, cfg: &SearchConfig, data: &'a Batch) -> Result<Self> {
        if data.inputs.is_empty() {
            return Err(Error::Empty("search batch".into()));
        }
        let fine_outputs = match cfg.objective {
            Objective::Validation => {
                if data.labels.is_none() {
                    return Err(Error::Precondition("validation objective needs labeled data".into()));
                }
                None
            }
            Objective::Outdiff => {
                let fine = N::from_checkpoint(&apply_delta(base, delta)?)?;
                Some(outputs_of(&fine, &data.inputs)?)
            }
        };
        Ok(Evaluator {
            base,
            delta,
            p: cfg.p,
            seed: cfg.seed,
            data,
            fine_outputs,
        })
    }

    fn score<N: Network>(&self, q: &QValue) -> Result<f64> {
        let pruned = drop_rescale(self.delta, self.p, q, self.seed)?;
        let model = N::from_checkpoint(&apply_delta(self.base, &pruned.sparse)?)?;
        match (&self.fine_outputs, &self.data.labels) {
            (Some(fine), _) => mean_abs_diff(&outputs_of(&model, &self.data.inputs)?, fine),
            (None, Some(labels)) => objective_validation(&model, &self.data.inputs, labels),
            (None, None) => unreachable!("checked in Evaluator::new"),
        }
    }
}

/// Objective of one `q` under the same fixed mask the searches use.
pub fn evaluate_q<N: Network>(base: &ModelCheckpoint, delta: &DeltaSet, cfg: &SearchConfig, q: &QValue, data: &Batch) -> Result<f64> {
    Evaluator::new::<N>(base, delta, cfg, data)?.score::<N>(q)
}

/// Scans the global grid; a later grid point replaces the best on ties.
pub fn find_q_global<N: Network + Send + Sync>(base: &ModelCheckpoint, delta: &DeltaSet, cfg: &SearchConfig, data: &Batch) -> Result<QSelection> {
    let grid = cfg.grid()?;
    let eval = Evaluator::new::<N>(base, delta, cfg, data)?;
    let values: Vec<f64> = grid
        .par_iter()
        .map(|&q| eval.score::<N>(&QValue::Global(q)))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (t, v) in values.iter().enumerate() {
        if *v <= values[best] {
            best = t;
        }
    }
    Ok(QSelection {
        q: QValue::Global(grid[best]),
        objective: values[best],
        objective_kind: cfg.objective,
        eta: None,
        trace: grid
            .iter()
            .zip(&values)
            .enumerate()
            .map(|(t, (&q, &objective))| TracePoint {
                t: t + 1,
                q: Some(q),
                eta: None,
                q_layers: None,
                objective,
            })
            .collect(),
    })
}

/// Influence statistics of every weight matrix of `delta`, using the inputs
/// each matrix sees in the fine-tuned model.
pub fn layer_stats<N: Network>(base: &ModelCheckpoint, delta: &DeltaSet, x_batch: &[Vec<f64>]) -> Result<Vec<InfluenceStats>> {
    if x_batch.is_empty() {
        return Err(Error::Empty("statistics batch".into()));
    }
    let fine = N::from_checkpoint(&apply_delta(base, delta)?)?;
    let matrices: Vec<_> = delta.entries().iter().filter_map(|(_, t)| match t {
        Tensor::Matrix(m) => Some(m),
        Tensor::Vector(_) => None,
    }).collect();
    let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(x_batch.len()); matrices.len()];
    for x in x_batch {
        let inputs = fine.weight_inputs(x)?;
        if inputs.len() != matrices.len() {
            return Err(Error::dim(format!(
                "model exposes {} layer inputs for {} weight matrices",
                inputs.len(),
                matrices.len()
            )));
        }
        for (acc, v) in per_layer.iter_mut().zip(inputs) {
            acc.push(v);
        }
    }
    matrices.iter().zip(&per_layer).map(|(m, xs)| influence_stats_batch(m, xs)).collect()
}

/// Per-layer grid argmin of the analytic objective at a given `eta`.
pub fn per_layer_q_from_stats(stats: &[InfluenceStats], p: f64, gamma: f64, eta: f64, grid: &[f64]) -> Result<Vec<f64>> {
    stats.iter().map(|s| q_eta_minimize(eta, p, gamma, s, grid).map(|(q, _)| q)).collect()
}

/// One `q` per weight matrix for a fixed `eta`.
pub fn analytic_per_layer_q<N: Network>(
    base: &ModelCheckpoint,
    delta: &DeltaSet,
    x_batch: &[Vec<f64>],
    cfg: &SearchConfig,
    eta: f64,
) -> Result<Vec<f64>> {
    let stats = layer_stats::<N>(base, delta, x_batch)?;
    per_layer_q_from_stats(&stats, cfg.p, cfg.gamma, eta, &cfg.grid()?)
}

/// Scans `eta`; for each, builds the per-layer `q` vector and scores it under
/// the fixed mask. `x_batch` feeds the influence statistics.
pub fn find_q_perlayer<N: Network + Send + Sync>(
    base: &ModelCheckpoint,
    delta: &DeltaSet,
    cfg: &PerLayerConfig,
    x_batch: &[Vec<f64>],
    data: &Batch,
) -> Result<QSelection> {
    let etas = cfg.eta.values()?;
    let grid = cfg.search.grid()?;
    let stats = layer_stats::<N>(base, delta, x_batch)?;
    let eval = Evaluator::new::<N>(base, delta, &cfg.search, data)?;
    let points: Vec<(Vec<f64>, f64)> = etas
        .par_iter()
        .map(|&eta| {
            let qs = per_layer_q_from_stats(&stats, cfg.search.p, cfg.search.gamma, eta, &grid)?;
            let v = eval.score::<N>(&QValue::PerLayer(qs.clone()))?;
            Ok((qs, v))
        })
        .collect::<Result<_>>()?;
    let n = etas.len();
    let mut best: Option<usize> = None;
    for (t, (_, v)) in points.iter().enumerate() {
        let allowed = !(cfg.exclude_last && n > 1 && t == n - 1);
        if allowed && best.is_none_or(|b| *v <= points[b].1) {
            best = Some(t);
        }
    }
    let best = best.expect("at least one eligible eta");
    Ok(QSelection {
        q: QValue::PerLayer(points[best].0.clone()),
        objective: points[best].1,
        objective_kind: cfg.search.objective,
        eta: Some(etas[best]),
        trace: points
            .iter()
            .zip(&etas)
            .enumerate()
            .map(|(t, ((qs, v), &eta))| TracePoint {
                t: t + 1,
                q: None,
                eta: Some(eta),
                q_layers: Some(qs.clone()),
                objective: *v,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_stays_below_two() {
        for p in [0.1, 0.5, 0.9, 0.99, 0.999] {
            let (dq, n) = default_q_grid(p);
            let g = q_grid(p, dq, n).unwrap();
            assert!(*g.last().unwrap() <= Q_GRID_MAX);
            assert!(n <= 40 && n >= 1);
        }
        assert_eq!(default_q_grid(0.99).1, 40);
    }

    #[test]
    fn eta_grids() {
        let lin = EtaGrid::Linear { deta: 0.5, rounds: 3 }.values().unwrap();
        assert_eq!(lin, vec![0.5, 1.0, 1.5]);
        let log = EtaGrid::default().values().unwrap();
        assert_eq!(log.len(), 20);
        assert!((log[0] - 1e-3).abs() < 1e-15 && (log[19] - 1e2).abs() < 1e-9);
        assert!(EtaGrid::Linear { deta: 0.0, rounds: 3 }.values().is_err());
        assert!(EtaGrid::Log { min: 1.0, max: 0.5, rounds: 3 }.values().is_err());
    }

    #[test]
    fn objective_parse() {
        assert_eq!("val".parse::<Objective>().unwrap(), Objective::Validation);
        assert!("foo".parse::<Objective>().is_err());
    }
}
