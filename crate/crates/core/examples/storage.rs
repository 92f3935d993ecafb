//! CSR container sizes after pruning a 1024x1024 delta, and a bit-exact
//! save/load round trip.

use deltaprune::checkpoint::container::{encode_dense_delta, encode_delta, load_delta, save_delta};
use deltaprune::checkpoint::{DeltaSet, Tensor};
use deltaprune::numkit::{Matrix, RngStream};
use deltaprune::pruners::dare;

fn main() -> deltaprune::Result<()> {
    let mut r = RngStream::new(2, "example");
    let m = Matrix::from_fn(1024, 1024, |_, _| ((r.uniform() - 0.5) * 0.02) as f32);
    let delta = DeltaSet::new("example", vec![("w".into(), Tensor::Matrix(m))])?;
    println!("dense      {:>9} bytes", encode_dense_delta(&delta)?.len());
    for p in [0.9, 0.99, 0.999] {
        let pruned = dare(&delta, p, 0)?;
        println!("p={p:<6}   {:>9} bytes, nnz {}", encode_delta(&pruned.sparse)?.len(), pruned.sparse.nnz());
    }

    let dir = std::env::temp_dir().join("deltaprune-storage-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("pruned.dppx");
    let pruned = dare(&delta, 0.99, 0)?.sparse;
    save_delta(&path, &pruned)?;
    assert_eq!(load_delta(&path)?, pruned);
    println!("round trip through {} is exact", path.display());
    Ok(())
}
