//! Checkpoints, delta parameters and their sparse representation.
//!
//! A [`ModelCheckpoint`] is an ordered list of named tensors. The difference
//! of two checkpoints with the same topology is a [`DeltaSet`]; pruning turns
//! a delta into a [`SparseDelta`] whose tensors are stored either dense or in
//! CSR form. All three are persisted with the DPPX container in [`container`].

pub mod container;
mod csr;
mod stats;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{fnv1a64, Matrix, Vector};

pub use csr::{from_csr, to_csr, CsrTensor, SparseDelta, SparseTensor};
pub use stats::{delta_stats, DeltaStatsReport, DeltaStatsRow};

/// Shape of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    /// Row count when viewed as a matrix; vectors are a single row.
    pub fn rows(&self) -> usize {
        match *self {
            Shape::Vector(_) => 1,
            Shape::Matrix(r, _) => r,
        }
    }

    pub fn cols(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Matrix(_, c) => c,
        }
    }

    pub fn numel(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_matrix(&self) -> bool {
        matches!(self, Shape::Matrix(..))
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shape::Vector(n) => write!(f, "[{n}]"),
            Shape::Matrix(r, c) => write!(f, "[{r}x{c}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Vector(Vector),
    Matrix(Matrix),
}

impl Tensor {
    pub fn shape(&self) -> Shape {
        match self {
            Tensor::Vector(v) => Shape::Vector(v.len()),
            Tensor::Matrix(m) => Shape::Matrix(m.rows(), m.cols()),
        }
    }

    pub fn values(&self) -> &[f32] {
        match self {
            Tensor::Vector(v) => v.data(),
            Tensor::Matrix(m) => m.data(),
        }
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        match self {
            Tensor::Vector(v) => v.data_mut(),
            Tensor::Matrix(m) => m.data_mut(),
        }
    }

    pub fn zeros(shape: Shape) -> Tensor {
        match shape {
            Shape::Vector(n) => Tensor::Vector(Vector::zeros(n)),
            Shape::Matrix(r, c) => Tensor::Matrix(Matrix::zeros(r, c)),
        }
    }

    pub fn from_values(shape: Shape, values: Vec<f32>) -> Result<Tensor> {
        match shape {
            Shape::Vector(n) => {
                if values.len() != n {
                    return Err(Error::dim(format!("vector [{n}] got {} values", values.len())));
                }
                Ok(Tensor::Vector(Vector::new(values)?))
            }
            Shape::Matrix(r, c) => Ok(Tensor::Matrix(Matrix::new(r, c, values)?)),
        }
    }

    pub fn as_matrix(&self) -> Option<&Matrix> {
        match self {
            Tensor::Matrix(m) => Some(m),
            Tensor::Vector(_) => None,
        }
    }

    pub fn as_vector(&self) -> Option<&Vector> {
        match self {
            Tensor::Vector(v) => Some(v),
            Tensor::Matrix(_) => None,
        }
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        let shape = self.shape();
        let values = self.values().iter().map(|&v| f(v)).collect();
        Tensor::from_values(shape, values).expect("shape preserved")
    }
}

/// Base or fine-tuned model weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub topology_tag: String,
    tensors: Vec<(String, Tensor)>,
    /// Free-form provenance (training configuration, seeds).
    pub meta: BTreeMap<String, String>,
}

impl ModelCheckpoint {
    pub fn new(topology_tag: impl Into<String>, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        check_unique(tensors.iter().map(|(n, _)| n.as_str()))?;
        Ok(ModelCheckpoint {
            topology_tag: topology_tag.into(),
            tensors,
            meta: BTreeMap::new(),
        })
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    /// 64-bit FNV over tensor names, shapes and values.
    pub fn digest(&self) -> u64 {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(self.topology_tag.as_bytes());
        for (name, t) in &self.tensors {
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(0);
            bytes.extend_from_slice(&(t.shape().rows() as u64).to_le_bytes());
            bytes.extend_from_slice(&(t.shape().cols() as u64).to_le_bytes());
            for v in t.values() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.shape().numel()).sum()
    }
}

fn check_unique<'a>(names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::Precondition(format!("duplicate tensor name `{n}`")));
        }
    }
    Ok(())
}

/// How a delta was pruned and which checkpoints it came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeltaMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_digest: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fine_digest: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<QValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Any further resolved configuration.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub config: BTreeMap<String, String>,
}

/// A rescale parameter: one global value or one per weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QValue {
    Global(f64),
    PerLayer(Vec<f64>),
}

/// Dense per-tensor delta parameters, `fine - base`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSet {
    pub topology_tag: String,
    entries: Vec<(String, Tensor)>,
    pub meta: DeltaMeta,
}

impl DeltaSet {
    pub fn new(topology_tag: impl Into<String>, entries: Vec<(String, Tensor)>) -> Result<Self> {
        check_unique(entries.iter().map(|(n, _)| n.as_str()))?;
        Ok(DeltaSet {
            topology_tag: topology_tag.into(),
            entries,
            meta: DeltaMeta::default(),
        })
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Entrywise scaling; provenance digests are dropped since the result no
    /// longer reconstructs the fine-tuned checkpoint.
    pub fn scaled(&self, s: f32) -> DeltaSet {
        DeltaSet {
            topology_tag: self.topology_tag.clone(),
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.map(|v| v * s))).collect(),
            meta: DeltaMeta::default(),
        }
    }

    pub fn negated(&self) -> DeltaSet {
        self.scaled(-1.0)
    }

    /// Names of the 2-D entries, in order. These are the "layers" for
    /// per-layer rescaling.
    pub fn weight_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, t)| t.shape().is_matrix())
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Mean absolute value over every stored delta parameter.
    pub fn mean_abs(&self) -> f64 {
        let (sum, n) = self.entries.iter().fold((0.0f64, 0usize), |(s, n), (_, t)| {
            (s + t.values().iter().map(|v| v.abs() as f64).sum::<f64>(), n + t.values().len())
        });
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// `fine - base`, tensor by tensor.
///
/// Each stored value `d` satisfies `base + d == fine` in `f32` whenever such a
/// `d` exists, so [`apply_delta`] reproduces the fine-tuned checkpoint exactly.
pub fn compute_delta(fine: &ModelCheckpoint, base: &ModelCheckpoint) -> Result<DeltaSet> {
    check_compatible(base, fine.topology_tag.as_str(), fine.tensors.iter().map(|(n, t)| (n.as_str(), t.shape())))?;
    let entries = fine
        .tensors
        .iter()
        .zip(&base.tensors)
        .map(|((name, f), (_, b))| {
            let values = f
                .values()
                .iter()
                .zip(b.values())
                .map(|(&fv, &bv)| invertible_diff(fv, bv))
                .collect();
            Tensor::from_values(f.shape(), values).map(|t| (name.clone(), t))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut delta = DeltaSet::new(fine.topology_tag.clone(), entries)?;
    delta.meta.base_digest = Some(base.digest());
    delta.meta.fine_digest = Some(fine.digest());
    Ok(delta)
}

/// `fine - base` rounded to `f32`, nudged by at most a few ulps so that
/// `base + d` rounds back to `fine`. When `d` sits in a coarser binade than
/// `fine` no such value may exist; then `base + d` is the nearest reachable
/// neighbour, one ulp of `fine` away.
fn invertible_diff(fine: f32, base: f32) -> f32 {
    let d = fine - base;
    if base + d == fine {
        return d;
    }
    let err = |c: f32| ((base + c) as f64 - fine as f64).abs();
    let (mut lo, mut hi, mut best) = (d, d, d);
    for _ in 0..4 {
        lo = lo.next_down();
        hi = hi.next_up();
        for c in [lo, hi] {
            if base + c == fine {
                return c;
            }
            if err(c) < err(best) {
                best = c;
            }
        }
    }
    best
}

fn check_compatible<'a>(
    base: &ModelCheckpoint,
    topology_tag: &str,
    entries: impl ExactSizeIterator<Item = (&'a str, Shape)>,
) -> Result<()> {
    if base.topology_tag != topology_tag {
        return Err(Error::IncompatibleCheckpoints(format!(
            "topology `{}` vs `{}`",
            base.topology_tag, topology_tag
        )));
    }
    if entries.len() != base.tensors.len() {
        return Err(Error::IncompatibleCheckpoints(format!(
            "{} tensors vs {}",
            base.tensors.len(),
            entries.len()
        )));
    }
    for ((bn, bt), (n, shape)) in base.tensors.iter().zip(entries) {
        if bn != n || bt.shape() != shape {
            return Err(Error::IncompatibleCheckpoints(format!(
                "tensor `{bn}` {} vs `{n}` {shape}",
                bt.shape()
            )));
        }
    }
    Ok(())
}

/// Anything that can be added onto a base checkpoint.
pub trait DeltaLike {
    fn topology_tag(&self) -> &str;
    fn meta(&self) -> &DeltaMeta;
    fn entry_shapes(&self) -> Vec<(&str, Shape)>;
    /// Dense values of entry `idx`; absent sparse entries are zero.
    fn dense_values(&self, idx: usize) -> Vec<f32>;
}

impl DeltaLike for DeltaSet {
    fn topology_tag(&self) -> &str {
        &self.topology_tag
    }

    fn meta(&self) -> &DeltaMeta {
        &self.meta
    }

    fn entry_shapes(&self) -> Vec<(&str, Shape)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t.shape())).collect()
    }

    fn dense_values(&self, idx: usize) -> Vec<f32> {
        self.entries[idx].1.values().to_vec()
    }
}

/// `base + delta`, entrywise in `f32`.
pub fn apply_delta(base: &ModelCheckpoint, delta: &impl DeltaLike) -> Result<ModelCheckpoint> {
    let shapes = delta.entry_shapes();
    check_compatible(base, delta.topology_tag(), shapes.into_iter())?;
    if let Some(expected) = delta.meta().base_digest {
        let got = base.digest();
        if got != expected {
            return Err(Error::IncompatibleCheckpoints(format!(
                "delta was computed against base digest {expected:016x}, got {got:016x}"
            )));
        }
    }
    let tensors = base
        .tensors
        .iter()
        .enumerate()
        .map(|(idx, (name, b))| {
            let d = delta.dense_values(idx);
            let values = b.values().iter().zip(&d).map(|(&bv, &dv)| bv + dv).collect();
            Tensor::from_values(b.shape(), values).map(|t| (name.clone(), t))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = ModelCheckpoint::new(base.topology_tag.clone(), tensors)?;
    out.meta = base.meta.clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::RngStream;
    use proptest::prelude::*;

    pub(crate) fn toy_checkpoint(seed: u64, scale: f32) -> ModelCheckpoint {
        let mut rng = RngStream::new(seed, "toy");
        let w = Matrix::from_fn(3, 4, |_, _| (rng.uniform() as f32 - 0.5) * scale);
        let b = Vector::new((0..3).map(|_| (rng.uniform() as f32 - 0.5) * scale).collect()).unwrap();
        ModelCheckpoint::new(
            "toy",
            vec![("w".into(), Tensor::Matrix(w)), ("b".into(), Tensor::Vector(b))],
        )
        .unwrap()
    }

    #[test]
    fn delta_of_equal_checkpoints_is_zero() {
        let c = toy_checkpoint(1, 2.0);
        let d = compute_delta(&c, &c).unwrap();
        assert!(d.entries().iter().all(|(_, t)| t.values().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn delta_from_zero_base_is_fine() {
        let fine = toy_checkpoint(2, 2.0);
        let base = ModelCheckpoint::new(
            "toy",
            fine.tensors().iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect(),
        )
        .unwrap();
        let d = compute_delta(&fine, &base).unwrap();
        for ((_, dt), (_, ft)) in d.entries().iter().zip(fine.tensors()) {
            assert_eq!(dt.values(), ft.values());
        }
    }

    #[test]
    fn apply_zero_delta_is_identity() {
        let base = toy_checkpoint(3, 1.0);
        let zero = compute_delta(&base, &base).unwrap();
        assert_eq!(apply_delta(&base, &zero).unwrap().tensors(), base.tensors());
    }

    #[test]
    fn add_then_subtract_within_one_ulp() {
        let base = toy_checkpoint(4, 1.0);
        let fine = toy_checkpoint(5, 1.0);
        let d = compute_delta(&fine, &base).unwrap();
        let there = apply_delta(&base, &d).unwrap();
        let back = apply_delta(&there, &d.negated()).unwrap();
        for ((_, a), (_, b)) in back.tensors().iter().zip(base.tensors()) {
            for (&x, &y) in a.values().iter().zip(b.values()) {
                let ulp = (y.next_up() - y).abs().max((y - y.next_down()).abs());
                assert!((x - y).abs() <= ulp, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn mismatched_checkpoints_rejected() {
        let a = toy_checkpoint(1, 1.0);
        let mut b = toy_checkpoint(2, 1.0);
        b.topology_tag = "other".into();
        assert!(matches!(compute_delta(&a, &b), Err(Error::IncompatibleCheckpoints(_))));

        let c = ModelCheckpoint::new("toy", vec![("w".into(), Tensor::Matrix(Matrix::zeros(3, 4)))]).unwrap();
        assert!(matches!(compute_delta(&a, &c), Err(Error::IncompatibleCheckpoints(_))));
    }

    #[test]
    fn apply_checks_base_digest() {
        let base = toy_checkpoint(1, 1.0);
        let fine = toy_checkpoint(2, 1.0);
        let other = toy_checkpoint(3, 1.0);
        let d = compute_delta(&fine, &base).unwrap();
        assert!(matches!(apply_delta(&other, &d), Err(Error::IncompatibleCheckpoints(_))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::Vector(Vector::zeros(1));
        assert!(ModelCheckpoint::new("x", vec![("a".into(), t.clone()), ("a".into(), t)]).is_err());
    }

    proptest! {
        #[test]
        fn compute_apply_round_trip(
            base in prop::collection::vec(-1e3f32..1e3, 1..64),
            rel in prop::collection::vec(-0.5f32..1.0, 64),
            shift in prop::collection::vec(-1e-2f32..1e-2, 64),
        ) {
            let n = base.len();
            let fine: Vec<f32> = base.iter().zip(&rel).zip(&shift).map(|((b, r), s)| b * (1.0 + r) + s).collect();
            let mk = |v: Vec<f32>| ModelCheckpoint::new("p", vec![("v".into(), Tensor::Vector(Vector::new(v).unwrap()))]).unwrap();
            let (b, f) = (mk(base), mk(fine[..n].to_vec()));
            let d = compute_delta(&f, &b).unwrap();
            let back = apply_delta(&b, &d).unwrap();
            for (&x, &want) in back.tensors()[0].1.values().iter().zip(f.tensors()[0].1.values()) {
                let ulp = want.abs().next_up() - want.abs();
                prop_assert!(x == want || (x - want).abs() <= ulp, "{x} vs {want}");
            }
        }
    }
}
