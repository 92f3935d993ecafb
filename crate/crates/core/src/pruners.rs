//! Delta-parameter pruning methods.
//!
//! Every method works on the 2-D entries of a [`DeltaSet`]; 1-D entries
//! (biases, normalization gains) are carried over unpruned and stored dense.
//! Random methods draw one mask stream per tensor, keyed by the seed and the
//! tensor name, so the result does not depend on processing order and the
//! same seed always yields the same kept set regardless of the rescale.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{CsrTensor, DeltaMeta, DeltaSet, QValue, SparseDelta, SparseTensor, Tensor};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dare,
    DropRescaleQ,
    RandomDrop,
    Mp,
    Wanda,
    Structured,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Dare => "dare",
            Method::DropRescaleQ => "drop_rescale_q",
            Method::RandomDrop => "random_drop",
            Method::Mp => "mp",
            Method::Wanda => "wanda",
            Method::Structured => "structured",
        }
    }

    pub fn is_random(&self) -> bool {
        !matches!(self, Method::Mp | Method::Wanda)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "dare" => Method::Dare,
            "drop_rescale_q" | "drop-rescale-q" | "darex-q" => Method::DropRescaleQ,
            "random_drop" | "random-drop" => Method::RandomDrop,
            "mp" | "magnitude" => Method::Mp,
            "wanda" => Method::Wanda,
            "structured" => Method::Structured,
            other => return Err(Error::Usage(format!("unknown pruning method `{other}`"))),
        })
    }
}

/// Full pruning configuration, echoed into the result's metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub method: Method,
    /// Drop rate. For `Structured` this is `1 - a*b`.
    pub p: f64,
    pub q: Option<QValue>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub seed: u64,
}

impl PruneConfig {
    pub fn dare(p: f64, seed: u64) -> Self {
        PruneConfig {
            method: Method::Dare,
            p,
            q: Some(QValue::Global(1.0 - p)),
            a: None,
            b: None,
            seed,
        }
    }

    pub fn drop_rescale(p: f64, q: QValue, seed: u64) -> Self {
        PruneConfig {
            method: Method::DropRescaleQ,
            p,
            q: Some(q),
            a: None,
            b: None,
            seed,
        }
    }

    pub fn random_drop(p: f64, seed: u64) -> Self {
        PruneConfig {
            method: Method::RandomDrop,
            p,
            q: Some(QValue::Global(1.0)),
            a: None,
            b: None,
            seed,
        }
    }

    pub fn importance(method: Method, p: f64) -> Self {
        PruneConfig {
            method,
            p,
            q: None,
            a: None,
            b: None,
            seed: 0,
        }
    }

    pub fn structured(a: f64, b: f64, q: f64, seed: u64) -> Self {
        PruneConfig {
            method: Method::Structured,
            p: 1.0 - a * b,
            q: Some(QValue::Global(q)),
            a: Some(a),
            b: Some(b),
            seed,
        }
    }

    fn meta(&self, base: &DeltaMeta) -> DeltaMeta {
        DeltaMeta {
            base_digest: base.base_digest,
            fine_digest: None,
            method: Some(self.method.name().to_string()),
            p: Some(self.p),
            q: self.q.clone(),
            a: self.a,
            b: self.b,
            seed: self.method.is_random().then_some(self.seed),
            gamma: None,
            config: BTreeMap::new(),
        }
    }
}

/// Output of a pruner: the sparse delta plus per-tensor kept counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneResult {
    pub sparse: SparseDelta,
    /// Kept entries per 2-D tensor, in delta order.
    pub nnz: Vec<(String, usize)>,
    pub config: PruneConfig,
}

impl PruneResult {
    pub fn retention(&self) -> f64 {
        self.sparse.weight_retention()
    }
}

fn check_p(p: f64, allow_one: bool) -> Result<()> {
    let ok = if allow_one { (0.0..=1.0).contains(&p) } else { (0.0..1.0).contains(&p) };
    if ok {
        Ok(())
    } else {
        Err(Error::domain(format!("drop rate {p} outside [0, 1{}", if allow_one { "]" } else { ")" })))
    }
}

/// Resolves the rescale divisor for each 2-D tensor.
fn layer_qs(delta: &DeltaSet, q: &QValue) -> Result<Vec<f64>> {
    let n_layers = delta.weight_names().len();
    let qs = match q {
        QValue::Global(q) => vec![*q; n_layers],
        QValue::PerLayer(v) => {
            if v.len() != n_layers {
                return Err(Error::dim(format!(
                    "per-layer q has {} values for {n_layers} weight tensors",
                    v.len()
                )));
            }
            v.clone()
        }
    };
    if let Some(bad) = qs.iter().find(|q| !(q.is_finite() && **q > 0.0)) {
        return Err(Error::domain(format!("rescale q must be > 0, got {bad}")));
    }
    Ok(qs)
}

/// Applies `prune_matrix` to each 2-D entry (with its layer index) and keeps
/// 1-D entries dense.
fn assemble(
    delta: &DeltaSet,
    config: PruneConfig,
    mut prune_matrix: impl FnMut(usize, &str, &Matrix) -> Result<CsrTensor>,
) -> Result<PruneResult> {
    let mut tensors = Vec::with_capacity(delta.entries().len());
    let mut nnz = Vec::new();
    let mut layer = 0;
    for (name, t) in delta.entries() {
        match t {
            Tensor::Matrix(m) => {
                let csr = prune_matrix(layer, name, m)?;
                layer += 1;
                nnz.push((name.clone(), csr.nnz()));
                tensors.push((name.clone(), SparseTensor::Csr(csr)));
            }
            Tensor::Vector(_) => tensors.push((name.clone(), SparseTensor::Dense(t.clone()))),
        }
    }
    let sparse = SparseDelta::new(delta.topology_tag.clone(), tensors, config.meta(&delta.meta))?;
    Ok(PruneResult { sparse, nnz, config })
}

fn mask_stream(seed: u64, name: &str) -> RngStream {
    RngStream::new(seed, format!("drop/{name}"))
}

/// Keeps each entry independently with probability `1 - p` and divides kept
/// values by `q`. Dropped entries are absent; kept zeros are stored.
pub fn drop_rescale(delta: &DeltaSet, p: f64, q: &QValue, seed: u64) -> Result<PruneResult> {
    check_p(p, false)?;
    let qs = layer_qs(delta, q)?;
    drop_rescale_unchecked(delta, p, &qs, PruneConfig::drop_rescale(p, q.clone(), seed))
}

fn drop_rescale_unchecked(delta: &DeltaSet, p: f64, qs: &[f64], config: PruneConfig) -> Result<PruneResult> {
    let keep = 1.0 - p;
    let seed = config.seed;
    assemble(delta, config, |layer, name, m| {
        let q = qs[layer];
        let mut stream = mask_stream(seed, name);
        let mut csr = CsrTensor::from_dense_where(crate::checkpoint::Shape::Matrix(m.rows(), m.cols()), m.data(), |_, _| {
            stream.bernoulli(keep)
        });
        rescale_in_place(&mut csr, q)?;
        Ok(csr)
    })
}

fn rescale_in_place(csr: &mut CsrTensor, q: f64) -> Result<()> {
    if q == 1.0 {
        return Ok(());
    }
    let values: Vec<f32> = csr.values().iter().map(|&v| (v as f64 / q) as f32).collect();
    *csr = CsrTensor::new(csr.shape(), csr.row_ptr().to_vec(), csr.col_idx().to_vec(), values)
        .map_err(|_| Error::NonFinite(format!("rescaling by 1/{q} overflowed")))?;
    Ok(())
}

/// DARE: drop with probability `p`, rescale survivors by `1/(1-p)`.
pub fn dare(delta: &DeltaSet, p: f64, seed: u64) -> Result<PruneResult> {
    check_p(p, false)?;
    let qs = vec![1.0 - p; delta.weight_names().len()];
    drop_rescale_unchecked(delta, p, &qs, PruneConfig::dare(p, seed))
}

/// Random drop without rescaling. `p = 1` drops every 2-D entry.
pub fn random_drop(delta: &DeltaSet, p: f64, seed: u64) -> Result<PruneResult> {
    check_p(p, true)?;
    let qs = vec![1.0; delta.weight_names().len()];
    drop_rescale_unchecked(delta, p, &qs, PruneConfig::random_drop(p, seed))
}

/// Number of entries kept by importance methods: `(1-p)*m*n` rounded half
/// away from zero.
pub fn importance_k(p: f64, numel: usize) -> usize {
    ((1.0 - p) * numel as f64).round() as usize
}

/// Flat indices of the `k` highest scores; ties go to the lower row-major index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
    if k < idx.len() {
        if k > 0 {
            idx.select_nth_unstable_by(k - 1, cmp);
        }
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

fn importance_prune(delta: &DeltaSet, config: PruneConfig, score: impl Fn(&str, &Matrix) -> Result<Vec<f64>>) -> Result<PruneResult> {
    check_p(config.p, false)?;
    let p = config.p;
    assemble(delta, config, |_, name, m| {
        let scores = score(name, m)?;
        let keep = top_k_indices(&scores, importance_k(p, m.len()));
        let mut flags = vec![false; m.len()];
        for i in keep {
            flags[i] = true;
        }
        Ok(CsrTensor::from_dense_where(
            crate::checkpoint::Shape::Matrix(m.rows(), m.cols()),
            m.data(),
            |idx, _| flags[idx],
        ))
    })
}

/// Magnitude pruning: keep the `k` entries with the largest `|dW_ij|`, unrescaled.
pub fn magnitude_prune(delta: &DeltaSet, p: f64) -> Result<PruneResult> {
    importance_prune(delta, PruneConfig::importance(Method::Mp, p), |_, m| {
        Ok(m.data().iter().map(|v| v.abs() as f64).collect())
    })
}

/// WANDA on deltas: score `|dW_ij| * norm_j`, per-tensor top-k.
///
/// `feature_norms` maps every 2-D tensor name to one non-negative norm per
/// input column (see [`feature_norms`]).
pub fn wanda_prune(delta: &DeltaSet, p: f64, feature_norms: &BTreeMap<String, Vec<f32>>) -> Result<PruneResult> {
    importance_prune(delta, PruneConfig::importance(Method::Wanda, p), |name, m| {
        let norms = feature_norms
            .get(name)
            .ok_or_else(|| Error::Precondition(format!("missing feature norms for `{name}`")))?;
        if norms.len() != m.cols() {
            return Err(Error::Precondition(format!(
                "`{name}` has {} input features, got {} norms",
                m.cols(),
                norms.len()
            )));
        }
        if let Some(n) = norms.iter().find(|n| !(n.is_finite() && **n >= 0.0)) {
            return Err(Error::domain(format!("feature norm {n} for `{name}` is not >= 0")));
        }
        Ok((0..m.rows())
            .flat_map(|i| m.row(i).iter().zip(norms).map(|(w, n)| w.abs() as f64 * *n as f64))
            .collect())
    })
}

/// How calibration activations are reduced to one norm per input feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureNorm {
    /// Euclidean norm of each feature over the batch.
    #[default]
    BatchL2,
    /// Mean absolute activation per feature.
    MeanAbs,
}

pub fn feature_norms(batch: &[Vec<f32>], kind: FeatureNorm) -> Result<Vec<f32>> {
    let dim = batch
        .first()
        .map(|x| x.len())
        .ok_or_else(|| Error::Empty("calibration batch".into()))?;
    let mut acc = vec![0.0f64; dim];
    for x in batch {
        if x.len() != dim {
            return Err(Error::dim(format!("calibration rows of length {dim} and {}", x.len())));
        }
        for (a, &v) in acc.iter_mut().zip(x) {
            match kind {
                FeatureNorm::BatchL2 => *a += v as f64 * v as f64,
                FeatureNorm::MeanAbs => *a += (v as f64).abs(),
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|a| match kind {
            FeatureNorm::BatchL2 => a.sqrt() as f32,
            FeatureNorm::MeanAbs => (a / batch.len() as f64) as f32,
        })
        .collect())
}

/// Columns kept by [`structured_prune`] for one tensor, ascending.
pub fn structured_columns(cols: usize, a: f64, stream: &mut RngStream) -> Vec<usize> {
    let k = ((a * cols as f64).ceil() as usize).min(cols);
    // partial Fisher-Yates
    let mut perm: Vec<usize> = (0..cols).collect();
    for i in 0..k {
        let j = i + stream.index(cols - i);
        perm.swap(i, j);
    }
    let mut chosen = perm[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Structured drop: per tensor choose `ceil(a*n)` input columns uniformly,
/// keep each entry inside them with probability `b`, rescale by `1/q`.
pub fn structured_prune(delta: &DeltaSet, a: f64, b: f64, q: f64, seed: u64) -> Result<PruneResult> {
    for (label, v) in [("a", a), ("b", b)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::domain(format!("structured fraction {label}={v} outside (0, 1]")));
        }
    }
    if !(q.is_finite() && q > 0.0) {
        return Err(Error::domain(format!("rescale q must be > 0, got {q}")));
    }
    assemble(delta, PruneConfig::structured(a, b, q, seed), |_, name, m| {
        let stream = RngStream::new(seed, format!("structured/{name}"));
        let chosen = structured_columns(m.cols(), a, &mut stream.derive("columns"));
        let mut selected = vec![false; m.cols()];
        for c in chosen {
            selected[c] = true;
        }
        let cols = m.cols();
        let mut entries = stream.derive("entries");
        let mut csr = CsrTensor::from_dense_where(crate::checkpoint::Shape::Matrix(m.rows(), cols), m.data(), |idx, _| {
            selected[idx % cols] && entries.bernoulli(b)
        });
        rescale_in_place(&mut csr, q)?;
        Ok(csr)
    })
}

/// Dispatches on `config.method`. WANDA needs `feature_norms`.
pub fn prune(delta: &DeltaSet, config: &PruneConfig, feature_norms: Option<&BTreeMap<String, Vec<f32>>>) -> Result<PruneResult> {
    match config.method {
        Method::Dare => dare(delta, config.p, config.seed),
        Method::DropRescaleQ => {
            let q = config
                .q
                .as_ref()
                .ok_or_else(|| Error::Precondition("drop_rescale_q needs q".into()))?;
            drop_rescale(delta, config.p, q, config.seed)
        }
        Method::RandomDrop => random_drop(delta, config.p, config.seed),
        Method::Mp => magnitude_prune(delta, config.p),
        Method::Wanda => {
            let norms = feature_norms.ok_or_else(|| Error::Precondition("wanda needs feature norms".into()))?;
            wanda_prune(delta, config.p, norms)
        }
        Method::Structured => {
            let (a, b) = match (config.a, config.b) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::Precondition("structured pruning needs a and b".into())),
            };
            let q = match &config.q {
                Some(QValue::Global(q)) => *q,
                None => 1.0,
                Some(QValue::PerLayer(_)) => {
                    return Err(Error::Precondition("structured pruning takes a global q".into()))
                }
            };
            structured_prune(delta, a, b, q, config.seed)
        }
    }
}
