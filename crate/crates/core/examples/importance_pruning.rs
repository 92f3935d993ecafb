//! Magnitude and WANDA pruning of a fine-tuned model's delta, scored on the
//! fine-tuning test split.

use std::collections::BTreeMap;

use deltaprune::adamr::Regularizer;
use deltaprune::checkpoint::{apply_delta, compute_delta};
use deltaprune::harness::{evaluate, layer_activations, ModelZoo, TwoLayerNet, ZooConfig};
use deltaprune::pruners::{feature_norms, magnitude_prune, wanda_prune, FeatureNorm};

fn main() -> deltaprune::Result<()> {
    let zoo = ModelZoo::new(ZooConfig::default(), None, false)?;
    let base = zoo.pretrained(true, 0)?;
    let fine = zoo.finetuned(true, 0, Regularizer::None, 0.0)?;
    let delta = compute_delta(&fine, &base)?;
    let test = &zoo.finetune_data().test;

    let calib: Vec<Vec<f64>> = zoo.finetune_data().val.head(256).inputs().iter().map(|x| x.to_vec()).collect();
    let acts = layer_activations(&TwoLayerNet::from_checkpoint(&fine)?, &calib)?;
    let mut norms = BTreeMap::new();
    for (name, batch) in &acts {
        norms.insert(name.clone(), feature_norms(batch, FeatureNorm::BatchL2)?);
    }

    println!("fine-tuned accuracy {:.4}", evaluate(&TwoLayerNet::from_checkpoint(&fine)?, test)?);
    for p in [0.5, 0.9, 0.99] {
        let mp = magnitude_prune(&delta, p)?;
        let wanda = wanda_prune(&delta, p, &norms)?;
        let acc = |s: &deltaprune::checkpoint::SparseDelta| evaluate(&TwoLayerNet::from_checkpoint(&apply_delta(&base, s)?)?, test);
        println!(
            "p={p:<5} mp {:.4}  wanda {:.4}  (retention {:.4})",
            acc(&mp.sparse)?,
            acc(&wanda.sparse)?,
            mp.retention()
        );
    }
    Ok(())
}
