use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::adamr::Regularizer;
use crate::checkpoint::container::{encode_delta, encode_dense_delta};
use crate::checkpoint::{apply_delta, compute_delta, DeltaSet, ModelCheckpoint, QValue, Tensor};
use crate::error::{Error, Result};
use crate::harness::report::{ExperimentReport, ReportRow};
use crate::harness::train::evaluate;
use crate::harness::zoo::{ModelZoo, ZooConfig};
use crate::harness::{layer_activations, TwoLayerNet};
use crate::numkit::{Matrix, RngStream};
use crate::pruners::{dare, drop_rescale, feature_norms, magnitude_prune, wanda_prune, FeatureNorm, PruneResult};
use crate::qsearch::{find_q_global, Batch, Objective, SearchConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentId {
    #[serde(rename = "fig1-q-sweep")]
    Fig1QSweep,
    #[serde(rename = "fig5a-reg-dare")]
    Fig5aRegDare,
    #[serde(rename = "fig5b-norm-ablation")]
    Fig5bNormAblation,
    #[serde(rename = "fig5c-l1-importance")]
    Fig5cL1Importance,
    #[serde(rename = "fig5d-best-fit")]
    Fig5dBestFit,
    #[serde(rename = "c3-lambda-sweep")]
    C3LambdaSweep,
    #[serde(rename = "table6-storage")]
    Table6Storage,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 7] = [
        ExperimentId::Fig1QSweep,
        ExperimentId::Fig5aRegDare,
        ExperimentId::Fig5bNormAblation,
        ExperimentId::Fig5cL1Importance,
        ExperimentId::Fig5dBestFit,
        ExperimentId::C3LambdaSweep,
        ExperimentId::Table6Storage,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentId::Fig1QSweep => "fig1-q-sweep",
            ExperimentId::Fig5aRegDare => "fig5a-reg-dare",
            ExperimentId::Fig5bNormAblation => "fig5b-norm-ablation",
            ExperimentId::Fig5cL1Importance => "fig5c-l1-importance",
            ExperimentId::Fig5dBestFit => "fig5d-best-fit",
            ExperimentId::C3LambdaSweep => "c3-lambda-sweep",
            ExperimentId::Table6Storage => "table6-storage",
        }
    }

    /// Drop rates scanned when the config does not override them.
    pub fn default_p_grid(&self) -> Vec<f64> {
        match self {
            ExperimentId::Fig1QSweep => vec![0.99],
            ExperimentId::C3LambdaSweep => vec![0.9, 0.99, 0.999],
            ExperimentId::Table6Storage => vec![0.9, 0.99, 0.999],
            _ => vec![0.5, 0.7, 0.9, 0.95, 0.99],
        }
    }
}

impl std::str::FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentId::ALL
            .into_iter()
            .find(|id| id.name() == s || id.name().split('-').next() == Some(s))
            .ok_or_else(|| Error::Usage(format!("unknown experiment `{s}`")))
    }
}

impl std::fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub zoo: ZooConfig,
    pub l1_lambda: f64,
    pub l2_lambda: f64,
    /// Overrides the experiment's default drop rates.
    pub p_grid: Option<Vec<f64>>,
    pub lambda_grid: Vec<f64>,
    /// Rescale multipliers `q / (1-p)` swept by the q experiment.
    pub q_multipliers: Vec<f64>,
    /// Training samples used for WANDA norms and the output-change batch.
    pub calib_batch: usize,
    /// Side of the square synthetic delta in the storage experiment.
    pub storage_dim: usize,
    pub model_dir: Option<PathBuf>,
    /// Fail instead of training when a model is missing from `model_dir`.
    pub require_models: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: (0..5).collect(),
            zoo: ZooConfig::default(),
            l1_lambda: 1e-2,
            l2_lambda: 1e-1,
            p_grid: None,
            lambda_grid: vec![0.0, 1e-3, 1e-2, 1e-1],
            q_multipliers: vec![0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0, 24.0, 32.0, 48.0, 64.0],
            calib_batch: 256,
            storage_dim: 1024,
            model_dir: None,
            require_models: false,
        }
    }
}

struct Ctx<'a> {
    id: ExperimentId,
    cfg: &'a ExperimentConfig,
    zoo: ModelZoo,
    report: ExperimentReport,
}

struct Row<'s> {
    method: &'s str,
    reg: Regularizer,
    lambda: f64,
    p: Option<f64>,
    q: Option<f64>,
    seed: u64,
    metric: &'s str,
}

impl Ctx<'_> {
    fn push(&mut self, r: Row<'_>, value: f64) {
        self.report.push(ReportRow {
            experiment: self.id.name().to_string(),
            method: r.method.to_string(),
            regularizer: r.reg.name().to_string(),
            lambda: r.lambda,
            p: r.p,
            q: r.q,
            seed: r.seed,
            metric: r.metric.to_string(),
            value,
        });
    }

    fn lambda_for(&self, reg: Regularizer) -> f64 {
        match reg {
            Regularizer::None => 0.0,
            Regularizer::L1 => self.cfg.l1_lambda,
            Regularizer::L2 => self.cfg.l2_lambda,
        }
    }

    fn models(&self, use_norm: bool, seed: u64, reg: Regularizer) -> Result<(ModelCheckpoint, ModelCheckpoint, DeltaSet)> {
        let base = self.zoo.pretrained(use_norm, seed)?;
        let fine = self.zoo.finetuned(use_norm, seed, reg, self.lambda_for(reg))?;
        let delta = compute_delta(&fine, &base)?;
        Ok((base, fine, delta))
    }

    fn test_acc(&self, base: &ModelCheckpoint, pruned: &PruneResult) -> Result<f64> {
        let net = TwoLayerNet::from_checkpoint(&apply_delta(base, &pruned.sparse)?)?;
        evaluate(&net, &self.zoo.finetune_data().test)
    }

    fn calib_inputs(&self) -> Vec<Vec<f64>> {
        let train = &self.zoo.finetune_data().train;
        (0..self.cfg.calib_batch.min(train.len())).map(|i| train.sample(i).to_vec()).collect()
    }

    fn wanda_norms(&self, fine: &ModelCheckpoint) -> Result<BTreeMap<String, Vec<f32>>> {
        let net = TwoLayerNet::from_checkpoint(fine)?;
        layer_activations(&net, &self.calib_inputs())?
            .into_iter()
            .map(|(k, rows)| Ok((k, feature_norms(&rows, FeatureNorm::BatchL2)?)))
            .collect()
    }

    fn p_grid(&self) -> Vec<f64> {
        self.cfg.p_grid.clone().unwrap_or_else(|| self.id.default_p_grid())
    }
}

/// Runs one scripted experiment and returns its rows.
///
/// Trained models come from a shared cache, so experiments that reuse the
/// same fine-tunes only train them once per process (or once per
/// `model_dir`).
pub fn run_experiment(id: ExperimentId, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Empty("seed list".into()));
    }
    let config = serde_json::json!({ "experiment": id.name(), "config": cfg });
    let zoo = ModelZoo::new(cfg.zoo.clone(), cfg.model_dir.clone(), cfg.require_models)?;
    let mut ctx = Ctx {
        id,
        cfg,
        zoo,
        report: ExperimentReport::new(config),
    };
    match id {
        ExperimentId::Fig1QSweep => fig1(&mut ctx)?,
        ExperimentId::Fig5aRegDare => {
            for &seed in &cfg.seeds {
                for reg in [Regularizer::None, Regularizer::L2, Regularizer::L1] {
                    prune_sweep(&mut ctx, true, seed, reg, "dare")?;
                }
            }
        }
        ExperimentId::Fig5bNormAblation => fig5b(&mut ctx)?,
        ExperimentId::Fig5cL1Importance => {
            for &seed in &cfg.seeds {
                for reg in [Regularizer::None, Regularizer::L1] {
                    for method in ["mp", "wanda"] {
                        prune_sweep(&mut ctx, true, seed, reg, method)?;
                    }
                }
            }
        }
        ExperimentId::Fig5dBestFit => {
            for &seed in &cfg.seeds {
                for (method, reg) in [
                    ("dare", Regularizer::L2),
                    ("mp", Regularizer::L1),
                    ("dare", Regularizer::None),
                    ("mp", Regularizer::None),
                ] {
                    prune_sweep(&mut ctx, true, seed, reg, method)?;
                }
            }
        }
        ExperimentId::C3LambdaSweep => c3(&mut ctx)?,
        ExperimentId::Table6Storage => table6(&mut ctx)?,
    }
    Ok(ctx.report)
}

fn prune_sweep(ctx: &mut Ctx<'_>, use_norm: bool, seed: u64, reg: Regularizer, method: &str) -> Result<()> {
    let (base, fine, delta) = ctx.models(use_norm, seed, reg)?;
    let norms = if method == "wanda" { Some(ctx.wanda_norms(&fine)?) } else { None };
    let label = match (method, use_norm) {
        ("dare", false) if ctx.id == ExperimentId::Fig5bNormAblation => "dare+identity",
        ("dare", true) if ctx.id == ExperimentId::Fig5bNormAblation => "dare+rmsnorm",
        _ => method,
    };
    for p in ctx.p_grid() {
        let (pruned, q) = match method {
            "dare" => (dare(&delta, p, seed)?, Some(1.0 - p)),
            "mp" => (magnitude_prune(&delta, p)?, None),
            "wanda" => (wanda_prune(&delta, p, norms.as_ref().expect("norms"))?, None),
            other => return Err(Error::Usage(format!("unknown method `{other}`"))),
        };
        let acc = ctx.test_acc(&base, &pruned)?;
        let lambda = ctx.lambda_for(reg);
        ctx.push(
            Row {
                method: label,
                reg,
                lambda,
                p: Some(p),
                q,
                seed,
                metric: "test_acc",
            },
            acc,
        );
    }
    Ok(())
}

fn fig1(ctx: &mut Ctx<'_>) -> Result<()> {
    let calib = ctx.calib_inputs();
    for &seed in &ctx.cfg.seeds.clone() {
        let (base, fine, delta) = ctx.models(true, seed, Regularizer::None)?;
        let fine_net = TwoLayerNet::from_checkpoint(&fine)?;
        let fine_out: Vec<Vec<f64>> = calib.iter().map(|x| fine_net.predict(x)).collect::<Result<_>>()?;
        for p in ctx.p_grid() {
            for &m in &ctx.cfg.q_multipliers.clone() {
                let q = ((1.0 - p) * m).min(1.0);
                let pruned = drop_rescale(&delta, p, &QValue::Global(q), seed)?;
                let net = TwoLayerNet::from_checkpoint(&apply_delta(&base, &pruned.sparse)?)?;
                let mut diff = 0.0;
                for (x, f) in calib.iter().zip(&fine_out) {
                    diff += net.predict(x)?.iter().zip(f).map(|(a, b)| (a - b).abs()).sum::<f64>() / f.len() as f64;
                }
                let row = |metric| Row {
                    method: "drop_rescale_q",
                    reg: Regularizer::None,
                    lambda: 0.0,
                    p: Some(p),
                    q: Some(q),
                    seed,
                    metric,
                };
                ctx.push(row("outdiff"), diff / calib.len() as f64);
                let acc = evaluate(&net, &ctx.zoo.finetune_data().test)?;
                ctx.push(row("test_acc"), acc);
            }
            let search = SearchConfig::new(p, Objective::Outdiff, seed);
            let sel = find_q_global::<TwoLayerNet>(&base, &delta, &search, &Batch::unlabeled(calib.clone()))?;
            let q = match sel.q {
                QValue::Global(q) => q,
                QValue::PerLayer(_) => unreachable!("global search"),
            };
            let pruned = drop_rescale(&delta, p, &sel.q, seed)?;
            let acc = ctx.test_acc(&base, &pruned)?;
            ctx.push(
                Row {
                    method: "darex_q_e",
                    reg: Regularizer::None,
                    lambda: 0.0,
                    p: Some(p),
                    q: Some(q),
                    seed,
                    metric: "test_acc",
                },
                acc,
            );
        }
    }
    Ok(())
}

fn fig5b(ctx: &mut Ctx<'_>) -> Result<()> {
    for &seed in &ctx.cfg.seeds.clone() {
        for use_norm in [true, false] {
            prune_sweep(ctx, use_norm, seed, Regularizer::None, "dare")?;
        }
    }
    Ok(())
}

fn c3(ctx: &mut Ctx<'_>) -> Result<()> {
    let lambdas = ctx.cfg.lambda_grid.clone();
    for &seed in &ctx.cfg.seeds.clone() {
        let base = ctx.zoo.pretrained(true, seed)?;
        for reg in [Regularizer::L1, Regularizer::L2] {
            for &lambda in &lambdas {
                let fine = ctx.zoo.finetuned(true, seed, reg, lambda)?;
                let delta = compute_delta(&fine, &base)?;
                let row = |metric, p: Option<f64>, q: Option<f64>| Row {
                    method: "dare",
                    reg,
                    lambda,
                    p,
                    q,
                    seed,
                    metric,
                };
                ctx.push(row("mean_abs_delta", None, None), weight_mean_abs(&delta));
                let fine_acc = evaluate(&TwoLayerNet::from_checkpoint(&fine)?, &ctx.zoo.finetune_data().test)?;
                ctx.push(row("finetune_test_acc", None, None), fine_acc);
                for p in ctx.p_grid() {
                    let acc = ctx.test_acc(&base, &dare(&delta, p, seed)?)?;
                    ctx.push(row("test_acc", Some(p), Some(1.0 - p)), acc);
                }
            }
        }
    }
    Ok(())
}

/// Mean |delta| over all trainable parameters.
fn weight_mean_abs(delta: &DeltaSet) -> f64 {
    delta.mean_abs()
}

fn table6(ctx: &mut Ctx<'_>) -> Result<()> {
    let n = ctx.cfg.storage_dim;
    for &seed in &ctx.cfg.seeds.clone() {
        let delta = synthetic_delta(n, seed);
        let dense_bytes = encode_dense_delta(&delta)?.len();
        let base_row = |metric, p: Option<f64>, q: Option<f64>| Row {
            method: "dare",
            reg: Regularizer::None,
            lambda: 0.0,
            p,
            q,
            seed,
            metric,
        };
        ctx.push(base_row("dense_bytes", Some(0.0), Some(1.0)), dense_bytes as f64);
        for p in ctx.p_grid() {
            let pruned = dare(&delta, p, seed)?;
            let bytes = encode_delta(&pruned.sparse)?.len();
            ctx.push(base_row("nnz", Some(p), Some(1.0 - p)), pruned.sparse.nnz() as f64);
            ctx.push(base_row("csr_bytes", Some(p), Some(1.0 - p)), bytes as f64);
        }
    }
    Ok(())
}

/// Square Gaussian delta used by the storage experiment.
pub(crate) fn synthetic_delta(n: usize, seed: u64) -> DeltaSet {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, 1e-2).expect("valid std");
    let mut rng = RngStream::new(seed, "synthetic-delta");
    let m = Matrix::from_fn(n, n, |_, _| normal.sample(&mut rng) as f32);
    DeltaSet::new("synthetic", vec![("w".to_string(), Tensor::Matrix(m))]).expect("single tensor")
}
