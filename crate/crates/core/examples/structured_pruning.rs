//! Structured drop: keep deltas only inside a random 5% of input columns,
//! and 20% of the entries there, for 1% net retention.

use deltaprune::checkpoint::{DeltaSet, SparseTensor, Tensor};
use deltaprune::numkit::{Matrix, RngStream};
use deltaprune::pruners::structured_prune;

fn main() -> deltaprune::Result<()> {
    let mut r = RngStream::new(3, "example");
    let m = Matrix::from_fn(512, 1000, |_, _| (r.uniform() - 0.5) as f32);
    let delta = DeltaSet::new("example", vec![("w".into(), Tensor::Matrix(m))])?;
    for seed in 0..5 {
        let res = structured_prune(&delta, 0.05, 0.20, 0.05 * 0.20, seed)?;
        let Some(SparseTensor::Csr(csr)) = res.sparse.get("w") else { unreachable!() };
        let mut cols: Vec<usize> = csr.iter().map(|(_, j, _)| j).collect();
        cols.sort_unstable();
        cols.dedup();
        println!("seed {seed}: retention {:.5}, {} columns touched", res.retention(), cols.len());
    }
    Ok(())
}
