use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ModelCheckpoint, Shape, Tensor};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream, Vector, RMSNORM_EPS};

pub const TOPOLOGY_TAG: &str = "two-layer-v1";
pub const TOPOLOGY_TAG_NO_NORM: &str = "two-layer-v1-identity-norm";

/// Tensor names in storage order.
pub const PARAM_NAMES: [&str; 6] = ["norm_in.gain", "fc1.weight", "fc1.bias", "norm_h.gain", "out.weight", "out.bias"];

const GAIN_IN: usize = 0;
const W1: usize = 1;
const B1: usize = 2;
const GAIN_H: usize = 3;
const WO: usize = 4;
const BO: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetDims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Default for NetDims {
    fn default() -> Self {
        NetDims {
            input: 64,
            hidden: 256,
            output: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    CrossEntropy,
    /// Mean over outputs of the squared error against one-hot targets.
    Mse,
}

/// `f(x) = W_o N(relu(W_1 N(x) + b_1)) + b_o` with RMSNorm `N` (or identity).
///
/// Parameters are kept in f64; checkpoints store f32.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerNet {
    dims: NetDims,
    use_norm: bool,
    params: Vec<Vec<f64>>,
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub x: Vec<f64>,
    pub r_in: f64,
    /// Input to `fc1.weight`.
    pub n_in: Vec<f64>,
    pub z: Vec<f64>,
    pub a: Vec<f64>,
    pub r_h: f64,
    /// Input to `out.weight`.
    pub n_h: Vec<f64>,
    pub logits: Vec<f64>,
}

fn param_shapes(d: NetDims) -> [Shape; 6] {
    [
        Shape::Vector(d.input),
        Shape::Matrix(d.hidden, d.input),
        Shape::Vector(d.hidden),
        Shape::Vector(d.hidden),
        Shape::Matrix(d.output, d.hidden),
        Shape::Vector(d.output),
    ]
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64 + RMSNORM_EPS).sqrt()
}

fn matvec_into(w: &[f64], cols: usize, x: &[f64], bias: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(w.chunks_exact(cols).zip(bias).map(|(row, b)| row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b));
}

impl TwoLayerNet {
    /// He-initialized weights, zero biases, unit gains.
    pub fn init(dims: NetDims, use_norm: bool, seed: u64) -> Self {
        let shapes = param_shapes(dims);
        let mut params: Vec<Vec<f64>> = shapes.iter().map(|s| vec![0.0; s.numel()]).collect();
        params[GAIN_IN].fill(1.0);
        params[GAIN_H].fill(1.0);
        for (idx, fan_in) in [(W1, dims.input), (WO, dims.hidden)] {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let mut rng = RngStream::new(seed, format!("init/{}", PARAM_NAMES[idx]));
            params[idx].iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        }
        TwoLayerNet { dims, use_norm, params }
    }

    pub fn zeros(dims: NetDims, use_norm: bool) -> Self {
        let params = param_shapes(dims).iter().map(|s| vec![0.0; s.numel()]).collect();
        TwoLayerNet { dims, use_norm, params }
    }

    pub fn dims(&self) -> NetDims {
        self.dims
    }

    pub fn use_norm(&self) -> bool {
        self.use_norm
    }

    pub fn topology_tag(&self) -> &'static str {
        if self.use_norm {
            TOPOLOGY_TAG
        } else {
            TOPOLOGY_TAG_NO_NORM
        }
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        PARAM_NAMES.iter().position(|n| *n == name).map(|i| self.params[i].as_slice())
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        PARAM_NAMES.iter().position(|n| *n == name).map(|i| &mut self.params[i])
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        let tensors = PARAM_NAMES
            .iter()
            .zip(param_shapes(self.dims))
            .zip(&self.params)
            .map(|((name, shape), p)| {
                let values: Vec<f32> = p.iter().map(|&v| v as f32).collect();
                let t = match shape {
                    Shape::Vector(_) => Tensor::Vector(Vector::new(values).expect("finite parameters")),
                    Shape::Matrix(r, c) => Tensor::Matrix(Matrix::new(r, c, values).expect("finite parameters")),
                };
                (name.to_string(), t)
            })
            .collect();
        ModelCheckpoint::new(self.topology_tag(), tensors).expect("unique names")
    }

    pub fn from_checkpoint(c: &ModelCheckpoint) -> Result<Self> {
        let use_norm = match c.topology_tag.as_str() {
            TOPOLOGY_TAG => true,
            TOPOLOGY_TAG_NO_NORM => false,
            other => {
                return Err(Error::IncompatibleCheckpoints(format!("`{other}` is not a two-layer checkpoint")))
            }
        };
        let names: Vec<&str> = c.names().collect();
        if names != PARAM_NAMES {
            return Err(Error::IncompatibleCheckpoints(format!("unexpected tensors {names:?}")));
        }
        let w1 = c.tensors()[W1].1.shape();
        let wo = c.tensors()[WO].1.shape();
        let dims = NetDims {
            input: w1.cols(),
            hidden: w1.rows(),
            output: wo.rows(),
        };
        for ((name, t), shape) in c.tensors().iter().zip(param_shapes(dims)) {
            if t.shape() != shape {
                return Err(Error::IncompatibleCheckpoints(format!("`{name}` has shape {}, expected {shape}", t.shape())));
            }
        }
        let params = c.tensors().iter().map(|(_, t)| t.values().iter().map(|&v| v as f64).collect()).collect();
        Ok(TwoLayerNet { dims, use_norm, params })
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims.input {
            return Err(Error::dim(format!("net takes {} inputs, got {}", self.dims.input, x.len())));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardCache> {
        self.check_input(x)?;
        let p = &self.params;
        let (r_in, n_in) = if self.use_norm {
            let r = rms(x);
            (r, x.iter().zip(&p[GAIN_IN]).map(|(v, g)| g * v / r).collect())
        } else {
            (1.0, x.to_vec())
        };
        let mut z = Vec::with_capacity(self.dims.hidden);
        matvec_into(&p[W1], self.dims.input, &n_in, &p[B1], &mut z);
        let a: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
        let (r_h, n_h) = if self.use_norm {
            let r = rms(&a);
            (r, a.iter().zip(&p[GAIN_H]).map(|(v, g)| g * v / r).collect())
        } else {
            (1.0, a.clone())
        };
        let mut logits = Vec::with_capacity(self.dims.output);
        matvec_into(&p[WO], self.dims.hidden, &n_h, &p[BO], &mut logits);
        Ok(ForwardCache {
            x: x.to_vec(),
            r_in,
            n_in,
            z,
            a,
            r_h,
            n_h,
            logits,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.logits)
    }

    /// Loss of one cached forward pass and its gradient w.r.t. the logits.
    pub fn loss_grad(logits: &[f64], label: usize, loss: Loss) -> (f64, Vec<f64>) {
        match loss {
            Loss::CrossEntropy => {
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let value = sum.ln() + max - logits[label];
                let mut g: Vec<f64> = exps.iter().map(|e| e / sum).collect();
                g[label] -= 1.0;
                (value, g)
            }
            Loss::Mse => {
                let k = logits.len() as f64;
                let mut value = 0.0;
                let g = logits
                    .iter()
                    .enumerate()
                    .map(|(i, &o)| {
                        let d = o - if i == label { 1.0 } else { 0.0 };
                        value += d * d / k;
                        2.0 * d / k
                    })
                    .collect();
                (value, g)
            }
        }
    }

    /// Accumulates `scale * dL/dtheta` for one sample into `grads`.
    pub fn backward_into(&self, cache: &ForwardCache, dlogits: &[f64], scale: f64, grads: &mut [Vec<f64>]) {
        let d = self.dims;
        let p = &self.params;
        for (k, &dl) in dlogits.iter().enumerate() {
            let dl = dl * scale;
            grads[BO][k] += dl;
            let row = &mut grads[WO][k * d.hidden..(k + 1) * d.hidden];
            row.iter_mut().zip(&cache.n_h).for_each(|(g, h)| *g += dl * h);
        }
        let mut dn_h = vec![0.0; d.hidden];
        for (k, &dl) in dlogits.iter().enumerate() {
            let dl = dl * scale;
            let row = &p[WO][k * d.hidden..(k + 1) * d.hidden];
            dn_h.iter_mut().zip(row).for_each(|(g, w)| *g += dl * w);
        }
        let da = if self.use_norm {
            rmsnorm_backward(&cache.a, cache.r_h, &p[GAIN_H], &dn_h, &mut grads[GAIN_H])
        } else {
            dn_h
        };
        let dz: Vec<f64> = da.iter().zip(&cache.z).map(|(g, z)| if *z > 0.0 { *g } else { 0.0 }).collect();
        let mut dn_in = vec![0.0; d.input];
        for (i, &g) in dz.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads[B1][i] += g;
            let gw = &mut grads[W1][i * d.input..(i + 1) * d.input];
            gw.iter_mut().zip(&cache.n_in).for_each(|(a, x)| *a += g * x);
            let w = &p[W1][i * d.input..(i + 1) * d.input];
            dn_in.iter_mut().zip(w).for_each(|(a, w)| *a += g * w);
        }
        if self.use_norm {
            rmsnorm_backward(&cache.x, cache.r_in, &p[GAIN_IN], &dn_in, &mut grads[GAIN_IN]);
        }
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.len()]).collect()
    }

    /// Mean loss and its gradient over a batch.
    pub fn loss_and_grad<X: AsRef<[f64]>>(&self, inputs: &[X], labels: &[usize], loss: Loss) -> Result<(f64, Vec<Vec<f64>>)> {
        if inputs.len() != labels.len() {
            return Err(Error::dim(format!("{} inputs, {} labels", inputs.len(), labels.len())));
        }
        if inputs.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        let mut grads = self.zero_grads();
        let scale = 1.0 / inputs.len() as f64;
        let mut total = 0.0;
        for (x, &y) in inputs.iter().zip(labels) {
            if y >= self.dims.output {
                return Err(Error::domain(format!("label {y} out of range for {} outputs", self.dims.output)));
            }
            let cache = self.forward(x.as_ref())?;
            let (l, g) = Self::loss_grad(&cache.logits, y, loss);
            total += l;
            self.backward_into(&cache, &g, scale, &mut grads);
        }
        Ok((total * scale, grads))
    }
}

/// Backward of `y = g * v / r` with `r = sqrt(mean(v^2) + eps)`; adds the gain
/// gradient into `dgain` and returns `dL/dv`.
fn rmsnorm_backward(v: &[f64], r: f64, gain: &[f64], dy: &[f64], dgain: &mut [f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mut s = Vec::with_capacity(v.len());
    let mut dot = 0.0;
    for i in 0..v.len() {
        let vhat = v[i] / r;
        dgain[i] += dy[i] * vhat;
        let si = dy[i] * gain[i];
        dot += si * vhat;
        s.push(si);
    }
    let mean = dot / n;
    s.iter().zip(v).map(|(si, vi)| (si - vi / r * mean) / r).collect()
}
