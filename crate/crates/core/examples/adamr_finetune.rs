//! Fine-tuning with AdamR at several strengths: stronger L2 pulls the
//! weights closer to the pretrained anchor.

use deltaprune::adamr::Regularizer;
use deltaprune::checkpoint::compute_delta;
use deltaprune::harness::{evaluate, ModelZoo, TwoLayerNet, ZooConfig};
use deltaprune::pruners::dare;
use deltaprune::checkpoint::apply_delta;

fn main() -> deltaprune::Result<()> {
    let zoo = ModelZoo::new(ZooConfig::default(), None, false)?;
    let base = zoo.pretrained(true, 0)?;
    let test = &zoo.finetune_data().test;
    println!("{:<4} {:<7} {:>10} {:>9} {:>11}", "reg", "lambda", "mean|d|", "fine acc", "dare@0.9");
    for (reg, lambda) in [
        (Regularizer::None, 0.0),
        (Regularizer::L2, 1e-2),
        (Regularizer::L2, 1e-1),
        (Regularizer::L1, 1e-2),
    ] {
        let fine = zoo.finetuned(true, 0, reg, lambda)?;
        let delta = compute_delta(&fine, &base)?;
        let pruned = dare(&delta, 0.9, 0)?;
        println!(
            "{:<4} {lambda:<7} {:>10.5} {:>9.4} {:>11.4}",
            reg.name(),
            delta.mean_abs(),
            evaluate(&TwoLayerNet::from_checkpoint(&fine)?, test)?,
            evaluate(&TwoLayerNet::from_checkpoint(&apply_delta(&base, &pruned.sparse)?)?, test)?
        );
    }
    Ok(())
}
