use crate::checkpoint::{check_unique, DeltaLike, DeltaMeta, DeltaSet, Shape, Tensor};
use crate::error::{Error, Result};

/// Compressed sparse row storage of one delta tensor. Vectors are stored as
/// a single row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrTensor {
    shape: Shape,
    row_ptr: Vec<u64>,
    col_idx: Vec<u32>,
    values: Vec<f32>,
}

impl CsrTensor {
    /// Validates every CSR invariant.
    pub fn new(shape: Shape, row_ptr: Vec<u64>, col_idx: Vec<u32>, values: Vec<f32>) -> Result<Self> {
        let rows = shape.rows();
        let cols = shape.cols();
        if row_ptr.len() != rows + 1 {
            return Err(Error::corrupt(format!(
                "row_ptr has {} entries for {rows} rows",
                row_ptr.len()
            )));
        }
        if col_idx.len() != values.len() {
            return Err(Error::corrupt(format!(
                "{} column indices vs {} values",
                col_idx.len(),
                values.len()
            )));
        }
        if row_ptr[0] != 0 || row_ptr[rows] != values.len() as u64 {
            return Err(Error::corrupt(format!(
                "row_ptr must run from 0 to nnz={}, got {}..{}",
                values.len(),
                row_ptr[0],
                row_ptr[rows]
            )));
        }
        for r in 0..rows {
            let (lo, hi) = (row_ptr[r], row_ptr[r + 1]);
            if lo > hi {
                return Err(Error::corrupt(format!("row_ptr decreases at row {r}")));
            }
            if hi > values.len() as u64 {
                return Err(Error::corrupt(format!("row_ptr exceeds nnz at row {r}")));
            }
            let row = &col_idx[lo as usize..hi as usize];
            if row.iter().any(|&c| c as usize >= cols) {
                return Err(Error::corrupt(format!("column index out of range in row {r}")));
            }
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::corrupt(format!("column indices not strictly increasing in row {r}")));
            }
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::corrupt(format!("non-finite stored value at {i}")));
        }
        Ok(CsrTensor {
            shape,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Stores the entries where `keep(idx, value)` holds, `idx` being the
    /// row-major flat index.
    pub fn from_dense_where(shape: Shape, dense: &[f32], mut keep: impl FnMut(usize, f32) -> bool) -> Self {
        let (rows, cols) = (shape.rows(), shape.cols());
        debug_assert_eq!(dense.len(), rows * cols);
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0u64);
        for r in 0..rows {
            for c in 0..cols {
                let idx = r * cols + c;
                let v = dense[idx];
                if keep(idx, v) {
                    col_idx.push(c as u32);
                    values.push(v);
                }
            }
            row_ptr.push(values.len() as u64);
        }
        CsrTensor {
            shape,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[u64] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[u32] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// `(row, col, value)` of every stored entry, row-major.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f32)> + '_ {
        (0..self.shape.rows()).flat_map(move |r| {
            let (lo, hi) = (self.row_ptr[r] as usize, self.row_ptr[r + 1] as usize);
            (lo..hi).map(move |k| (r, self.col_idx[k] as usize, self.values[k]))
        })
    }

    pub fn to_dense(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.shape.numel()];
        let cols = self.shape.cols();
        for (r, c, v) in self.iter() {
            out[r * cols + c] = v;
        }
        out
    }
}

/// One tensor of a [`SparseDelta`].
#[derive(Debug, Clone, PartialEq)]
pub enum SparseTensor {
    Dense(Tensor),
    Csr(CsrTensor),
}

impl SparseTensor {
    pub fn shape(&self) -> Shape {
        match self {
            SparseTensor::Dense(t) => t.shape(),
            SparseTensor::Csr(c) => c.shape(),
        }
    }

    /// Number of stored values.
    pub fn nnz(&self) -> usize {
        match self {
            SparseTensor::Dense(t) => t.values().len(),
            SparseTensor::Csr(c) => c.nnz(),
        }
    }

    pub fn to_dense(&self) -> Vec<f32> {
        match self {
            SparseTensor::Dense(t) => t.values().to_vec(),
            SparseTensor::Csr(c) => c.to_dense(),
        }
    }
}

/// A (typically pruned) delta with per-tensor dense or CSR storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDelta {
    pub topology_tag: String,
    tensors: Vec<(String, SparseTensor)>,
    pub meta: DeltaMeta,
}

impl SparseDelta {
    pub fn new(topology_tag: impl Into<String>, tensors: Vec<(String, SparseTensor)>, meta: DeltaMeta) -> Result<Self> {
        check_unique(tensors.iter().map(|(n, _)| n.as_str()))?;
        Ok(SparseDelta {
            topology_tag: topology_tag.into(),
            tensors,
            meta,
        })
    }

    pub fn tensors(&self) -> &[(String, SparseTensor)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&SparseTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn nnz(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.nnz()).sum()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.shape().numel()).sum()
    }

    /// Stored fraction of the 2-D (prunable) entries.
    pub fn weight_retention(&self) -> f64 {
        let (kept, total) = self
            .tensors
            .iter()
            .filter(|(_, t)| t.shape().is_matrix())
            .fold((0usize, 0usize), |(k, n), (_, t)| (k + t.nnz(), n + t.shape().numel()));
        if total == 0 {
            0.0
        } else {
            kept as f64 / total as f64
        }
    }
}

impl DeltaLike for SparseDelta {
    fn topology_tag(&self) -> &str {
        &self.topology_tag
    }

    fn meta(&self) -> &DeltaMeta {
        &self.meta
    }

    fn entry_shapes(&self) -> Vec<(&str, Shape)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t.shape())).collect()
    }

    fn dense_values(&self, idx: usize) -> Vec<f32> {
        self.tensors[idx].1.to_dense()
    }
}

/// Converts every tensor to CSR. With `drop_exact_zeros` the `+0.0` entries are
/// omitted (a stored `-0.0` is kept so densifying is bit-exact); otherwise
/// every entry is stored.
pub fn to_csr(delta: &DeltaSet, drop_exact_zeros: bool) -> SparseDelta {
    let tensors = delta
        .entries()
        .iter()
        .map(|(name, t)| {
            let csr = CsrTensor::from_dense_where(t.shape(), t.values(), |_, v| !(drop_exact_zeros && v.to_bits() == 0));
            (name.clone(), SparseTensor::Csr(csr))
        })
        .collect();
    SparseDelta {
        topology_tag: delta.topology_tag.clone(),
        tensors,
        meta: delta.meta.clone(),
    }
}

/// Densifies every tensor.
pub fn from_csr(sparse: &SparseDelta) -> DeltaSet {
    let entries = sparse
        .tensors
        .iter()
        .map(|(name, t)| {
            let dense = Tensor::from_values(t.shape(), t.to_dense()).expect("valid csr densifies");
            (name.clone(), dense)
        })
        .collect();
    let mut out = DeltaSet::new(sparse.topology_tag.clone(), entries).expect("names already unique");
    out.meta = sparse.meta.clone();
    out
}
