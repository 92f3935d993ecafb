//! Runs one scripted experiment and prints per-group medians.
//!
//! ```text
//! cargo run --release --example run_experiment -- fig5a [out.csv]
//! ```

use std::collections::BTreeMap;

use deltaprune::harness::{run_experiment, ExperimentConfig, ExperimentId};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn main() -> deltaprune::Result<()> {
    let mut args = std::env::args().skip(1);
    let id: ExperimentId = args.next().unwrap_or_else(|| "fig5a".into()).parse()?;
    let report = run_experiment(id, &ExperimentConfig::default())?;

    let mut groups: BTreeMap<(String, String, String, String), Vec<f64>> = BTreeMap::new();
    for r in report.rows() {
        let p = r.p.map(|p| format!("{p}")).unwrap_or_default();
        let key = (r.method.clone(), r.regularizer.clone(), p, r.metric.clone());
        groups.entry(key).or_default().push(r.value);
    }
    println!("{:<16} {:<6} {:<8} {:<18} {:>10} {:>3}", "method", "reg", "p", "metric", "median", "n");
    for ((method, reg, p, metric), v) in groups {
        let n = v.len();
        println!("{method:<16} {reg:<6} {p:<8} {metric:<18} {:>10.4} {n:>3}", median(v));
    }
    if let Some(path) = args.next() {
        report.write_csv(std::fs::File::create(&path)?)?;
        println!("rows written to {path}");
    }
    Ok(())
}
