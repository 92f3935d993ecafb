//! Per-layer `q` from the analytic objective: scan `eta`, pick one `q` per
//! weight matrix, score the vector on validation error.

use deltaprune::adamr::Regularizer;
use deltaprune::checkpoint::compute_delta;
use deltaprune::harness::{ModelZoo, TwoLayerNet, ZooConfig};
use deltaprune::qsearch::{find_q_perlayer, Batch, Objective, PerLayerConfig};

fn main() -> deltaprune::Result<()> {
    let zoo = ModelZoo::new(ZooConfig::default(), None, false)?;
    let base = zoo.pretrained(true, 1)?;
    let fine = zoo.finetuned(true, 1, Regularizer::None, 0.0)?;
    let delta = compute_delta(&fine, &base)?;
    let val = &zoo.finetune_data().val;
    let x: Vec<Vec<f64>> = val.inputs().iter().map(|r| r.to_vec()).collect();
    let batch = Batch::labeled(x.clone(), val.labels().to_vec());

    let cfg = PerLayerConfig::new(0.9, Objective::Validation, 1);
    let sel = find_q_perlayer::<TwoLayerNet>(&base, &delta, &cfg, &x[..256], &batch)?;
    for t in &sel.trace {
        println!("eta={:<10.4} q={:?} err={:.4}", t.eta.unwrap_or(f64::NAN), t.q_layers.as_deref().unwrap_or(&[]), t.objective);
    }
    println!("selected eta={:?} q={:?}", sel.eta, sel.q);
    Ok(())
}
