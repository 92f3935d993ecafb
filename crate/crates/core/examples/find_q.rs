//! Searches the rescale `q` at `p = 0.99` by output difference on unlabeled
//! data and compares test accuracy against plain DARE.

use deltaprune::adamr::Regularizer;
use deltaprune::checkpoint::{apply_delta, compute_delta};
use deltaprune::harness::{evaluate, ModelZoo, TwoLayerNet, ZooConfig};
use deltaprune::pruners::{dare, drop_rescale};
use deltaprune::qsearch::{find_q_global, Batch, Objective, SearchConfig};

fn main() -> deltaprune::Result<()> {
    let zoo = ModelZoo::new(ZooConfig::default(), None, false)?;
    let base = zoo.pretrained(true, 0)?;
    let fine = zoo.finetuned(true, 0, Regularizer::None, 0.0)?;
    let delta = compute_delta(&fine, &base)?;
    let data = zoo.finetune_data();
    let calib: Vec<Vec<f64>> = data.val.head(256).inputs().iter().map(|x| x.to_vec()).collect();

    let p = 0.99;
    let cfg = SearchConfig::new(p, Objective::Outdiff, 0);
    let sel = find_q_global::<TwoLayerNet>(&base, &delta, &cfg, &Batch::unlabeled(calib))?;
    for t in sel.trace.iter().take(8) {
        println!("q={:.3} outdiff={:.4}", t.q.unwrap_or(f64::NAN), t.objective);
    }
    let acc = |s: &deltaprune::checkpoint::SparseDelta| evaluate(&TwoLayerNet::from_checkpoint(&apply_delta(&base, s)?)?, &data.test);
    println!("selected q = {:?}", sel.q);
    println!("dare  (q = 1-p) accuracy {:.4}", acc(&dare(&delta, p, 0)?.sparse)?);
    println!("tuned q         accuracy {:.4}", acc(&drop_rescale(&delta, p, &sel.q, 0)?.sparse)?);
    Ok(())
}
