//! Central finite differences against the manual backward pass of the
//! two-layer network.

use deltaprune::harness::{Loss, NetDims, TwoLayerNet, PARAM_NAMES};
use deltaprune::numkit::RngStream;

fn main() -> deltaprune::Result<()> {
    let dims = NetDims { input: 5, hidden: 6, output: 3 };
    let net = TwoLayerNet::init(dims, true, 4);
    let mut r = RngStream::new(4, "batch");
    let x: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| r.uniform() * 2.0 - 1.0).collect()).collect();
    let y = vec![0, 2, 1, 2];
    let (_, grads) = net.loss_and_grad(&x, &y, Loss::CrossEntropy)?;
    let h = 1e-6;
    for (k, name) in PARAM_NAMES.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..net.params()[k].len() {
            let mut a = net.clone();
            a.params_mut()[k][j] += h;
            let mut b = net.clone();
            b.params_mut()[k][j] -= h;
            let num = (a.loss_and_grad(&x, &y, Loss::CrossEntropy)?.0 - b.loss_and_grad(&x, &y, Loss::CrossEntropy)?.0) / (2.0 * h);
            worst = worst.max((num - grads[k][j]).abs());
        }
        println!("{name:<12} max |numeric - analytic| = {worst:.2e}");
    }
    Ok(())
}
