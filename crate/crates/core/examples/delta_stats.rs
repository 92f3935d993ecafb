//! Per-layer magnitudes of a fine-tuning delta and of its influence terms
//! `|dW_ij x_j|`, written as CSV to stdout.

use deltaprune::adamr::Regularizer;
use deltaprune::checkpoint::{compute_delta, delta_stats};
use deltaprune::harness::{layer_activations, ModelZoo, TwoLayerNet, ZooConfig};

fn main() -> deltaprune::Result<()> {
    let zoo = ModelZoo::new(ZooConfig::default(), None, false)?;
    let base = zoo.pretrained(true, 0)?;
    let fine = zoo.finetuned(true, 0, Regularizer::None, 0.0)?;
    let delta = compute_delta(&fine, &base)?;
    let x: Vec<Vec<f64>> = zoo.finetune_data().val.head(256).inputs().iter().map(|r| r.to_vec()).collect();
    let acts = layer_activations(&TwoLayerNet::from_checkpoint(&fine)?, &x)?;
    delta_stats(&delta, &acts)?.write_csv(std::io::stdout())
}
