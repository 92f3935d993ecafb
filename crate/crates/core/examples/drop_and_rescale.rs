//! Random drop-and-rescale pruners on a synthetic delta: DARE (rescale
//! `1/(1-p)`), a custom `1/q`, and plain random drop. All three share the
//! same kept set for a given seed.

use deltaprune::checkpoint::{DeltaSet, QValue, SparseTensor, Tensor};
use deltaprune::numkit::{Matrix, RngStream};
use deltaprune::pruners::{dare, drop_rescale, random_drop};

fn kept_sum(d: &deltaprune::checkpoint::SparseDelta) -> f64 {
    match d.get("w") {
        Some(SparseTensor::Csr(c)) => c.values().iter().map(|v| *v as f64).sum(),
        _ => unreachable!(),
    }
}

fn main() -> deltaprune::Result<()> {
    let mut r = RngStream::new(1, "example");
    let m = Matrix::from_fn(64, 256, |_, _| (r.uniform() * 0.02) as f32);
    let delta = DeltaSet::new("example", vec![("w".into(), Tensor::Matrix(m.clone()))])?;
    let full: f64 = m.data().iter().map(|v| *v as f64).sum();

    let p = 0.9;
    let a = dare(&delta, p, 7)?;
    let b = drop_rescale(&delta, p, &QValue::Global(0.2), 7)?;
    let c = random_drop(&delta, p, 7)?;
    println!("sum of delta          {full:.4}");
    println!("dare    nnz={:<5} sum={:.4}", a.sparse.nnz(), kept_sum(&a.sparse));
    println!("q=0.2   nnz={:<5} sum={:.4}", b.sparse.nnz(), kept_sum(&b.sparse));
    println!("drop    nnz={:<5} sum={:.4}", c.sparse.nnz(), kept_sum(&c.sparse));
    println!("dare metadata q = {:?}", a.sparse.meta.q);
    Ok(())
}
