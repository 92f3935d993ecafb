//! Bound factors over `p` and a Monte-Carlo check of the combined bound for
//! one coefficient vector.

use deltaprune::theory::{bounds_table, mc_violation_rate, theorem1_bound, write_bounds_csv, BoundVariant, InfluenceStats};
use deltaprune::numkit::RngStream;

fn main() -> deltaprune::Result<()> {
    let grid = [0.1, 0.3, 0.5, 0.7, 0.9, 0.99, 0.999];
    write_bounds_csv(&bounds_table(&grid, 0.05, 1.0)?, std::io::stdout())?;

    let mut r = RngStream::new(5, "coeffs");
    let c: Vec<f64> = (0..4096).map(|_| r.uniform() - 0.3).collect();
    let stats = InfluenceStats::from_coeffs(&[c.as_slice()])?;
    for p in [0.5, 0.9, 0.99] {
        let bound = theorem1_bound(p, 0.05, &stats, BoundVariant::SqrtPhi)?[0];
        let rate = mc_violation_rate(&c, p, 1.0 - p, bound, 5000, 1)?;
        println!("p={p}: bound {bound:.3}, violation rate {rate:.4} (target <= 0.05)");
    }
    Ok(())
}
