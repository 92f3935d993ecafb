use serde::{Deserialize, Serialize};

use crate::adamr::{self, AdamRConfig, AdamRState};
use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::harness::net::{Loss, TwoLayerNet};
use crate::numkit::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamRConfig,
    pub loss: Loss,
    /// Linear learning-rate warmup over this many steps.
    pub warmup_steps: usize,
    /// Apply the delta regularizer to gains and biases as well as weight
    /// matrices.
    pub regularize_vectors: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            optimizer: AdamRConfig {
                lr: 2e-3,
                ..AdamRConfig::default()
            },
            loss: Loss::CrossEntropy,
            warmup_steps: 0,
            regularize_vectors: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochMetrics>,
}

/// Minibatch AdamR training in place.
///
/// `anchor` is the decay target; it defaults to the starting parameters.
/// A non-finite loss, or parameters beyond the `f32` range, abort with
/// [`Error::Divergence`].
pub fn train(net: &mut TwoLayerNet, data: &Dataset, anchor: Option<&[Vec<f64>]>, cfg: &TrainConfig) -> Result<History> {
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if !data.is_labeled() {
        return Err(Error::Precondition("training needs labeled data".into()));
    }
    if data.dim() != net.dims().input {
        return Err(Error::dim(format!("data dim {} vs net input {}", data.dim(), net.dims().input)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::domain("batch size must be >= 1"));
    }
    cfg.optimizer.validate()?;
    let mut anchor: Vec<Vec<f64>> = match anchor {
        Some(a) => a.to_vec(),
        None => net.params().to_vec(),
    };
    let mut state = AdamRState::new(net.params().iter().map(Vec::len));
    let mut history = History::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step_count = 0usize;
    for epoch in 0..cfg.epochs {
        let mut rng = RngStream::new(cfg.seed, format!("shuffle/{epoch}"));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.index(i + 1));
        }
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = net.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let cache = net.forward(data.sample(i))?;
                if argmax(&cache.logits) == data.label(i) {
                    correct += 1;
                }
                let (l, g) = TwoLayerNet::loss_grad(&cache.logits, data.label(i), cfg.loss);
                batch_loss += l;
                net.backward_into(&cache, &g, scale, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss in epoch {epoch}")));
            }
            loss_sum += batch_loss;
            step_count += 1;
            let mut opt = cfg.optimizer;
            if cfg.warmup_steps > 0 && step_count <= cfg.warmup_steps {
                opt.lr *= step_count as f64 / cfg.warmup_steps as f64;
            }
            if !cfg.regularize_vectors {
                for k in VECTOR_PARAMS {
                    anchor[k].copy_from_slice(&net.params()[k]);
                }
            }
            adamr::step(net.params_mut(), &grads, &anchor, &mut state, &opt)
                .map_err(|e| Error::Divergence(format!("epoch {epoch}: {e}")))?;
        }
        if net.params().iter().flatten().any(|v| !(v.abs() <= f32::MAX as f64)) {
            return Err(Error::Divergence(format!("parameters left the f32 range in epoch {epoch}")));
        }
        history.epochs.push(EpochMetrics {
            epoch,
            loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
        });
    }
    Ok(history)
}

/// Positions of the gain and bias vectors in the parameter list.
const VECTOR_PARAMS: [usize; 4] = [0, 2, 3, 5];

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Classification accuracy on `data`.
pub fn evaluate(net: &TwoLayerNet, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    if !data.is_labeled() {
        return Err(Error::Precondition("accuracy needs labeled data".into()));
    }
    let mut correct = 0usize;
    for i in 0..data.len() {
        if argmax(&net.predict(data.sample(i))?) == data.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean loss on `data`.
pub fn evaluate_loss(net: &TwoLayerNet, data: &Dataset, loss: Loss) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    if !data.is_labeled() {
        return Err(Error::Precondition("loss needs labeled data".into()));
    }
    let mut total = 0.0;
    for i in 0..data.len() {
        total += TwoLayerNet::loss_grad(&net.predict(data.sample(i))?, data.label(i), loss).0;
    }
    Ok(total / data.len() as f64)
}
