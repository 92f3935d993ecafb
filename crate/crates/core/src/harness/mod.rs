//! Two-layer testbed: model, manual backprop, synthetic tasks, training and
//! scripted experiments.

mod data;
mod experiments;
mod net;
mod report;
mod train;
mod zoo;

pub use data::{Dataset, Phase, TaskData, TaskSpec, DATASET_MAGIC, DATASET_VERSION};
pub use experiments::{run_experiment, ExperimentConfig, ExperimentId};
pub use net::{ForwardCache, Loss, NetDims, TwoLayerNet, PARAM_NAMES, TOPOLOGY_TAG, TOPOLOGY_TAG_NO_NORM};
pub use report::{ExperimentReport, ReportRow};
pub use train::{argmax, evaluate, evaluate_loss, train, EpochMetrics, History, TrainConfig};
pub use zoo::{ModelZoo, ZooConfig};

use std::collections::BTreeMap;

use crate::checkpoint::ModelCheckpoint;
use crate::error::Result;
use crate::qsearch::Network;

impl Network for TwoLayerNet {
    fn from_checkpoint(c: &ModelCheckpoint) -> Result<Self> {
        TwoLayerNet::from_checkpoint(c)
    }

    fn outputs(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.predict(x)
    }

    fn weight_inputs(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let c = self.forward(x)?;
        Ok(vec![c.n_in, c.n_h])
    }
}

/// Inputs seen by each weight matrix over a batch, keyed by tensor name, as
/// f32 rows (the form WANDA norms and delta statistics take).
pub fn layer_activations<X: AsRef<[f64]>>(net: &TwoLayerNet, batch: &[X]) -> Result<BTreeMap<String, Vec<Vec<f32>>>> {
    let mut fc1 = Vec::with_capacity(batch.len());
    let mut out = Vec::with_capacity(batch.len());
    for x in batch {
        let c = net.forward(x.as_ref())?;
        fc1.push(c.n_in.iter().map(|&v| v as f32).collect());
        out.push(c.n_h.iter().map(|&v| v as f32).collect());
    }
    Ok(BTreeMap::from([("fc1.weight".to_string(), fc1), ("out.weight".to_string(), out)]))
}
