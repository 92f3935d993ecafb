//! Dense matrix/vector arithmetic, activations, RMS normalization and keyed
//! random streams.
//!
//! Values are stored as `f32`; every reduction (dot products, means, norms)
//! accumulates in `f64`.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default epsilon for [`rmsnorm`].
pub const RMSNORM_EPS: f64 = 1e-6;

/// Row-major dense matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(&data, "matrix")?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from `f(row, col)`. Panics if `f` returns a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = f(i, j);
                assert!(v.is_finite(), "non-finite matrix entry at ({i}, {j})");
                data.push(v);
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Dense `f32` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f32>,
}

impl Vector {
    pub fn new(data: Vec<f32>) -> Result<Self> {
        check_finite(&data, "vector")?;
        Ok(Vector { data })
    }

    pub fn zeros(len: usize) -> Self {
        Vector {
            data: vec![0.0; len],
        }
    }

    pub fn ones(len: usize) -> Self {
        Vector {
            data: vec![1.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

impl From<Vector> for Vec<f32> {
    fn from(v: Vector) -> Self {
        v.data
    }
}

fn check_finite(data: &[f32], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(idx) => Err(Error::NonFinite(format!("{what} entry {idx} is {}", data[idx]))),
        None => Ok(()),
    }
}

/// `gain_j * x_j / sqrt(mean(x^2) + eps)`.
pub fn rmsnorm(x: &Vector, gain: &Vector, eps: f64) -> Result<Vector> {
    if x.len() != gain.len() {
        return Err(Error::dim(format!(
            "rmsnorm: input length {} vs gain length {}",
            x.len(),
            gain.len()
        )));
    }
    if eps < 0.0 {
        return Err(Error::domain(format!("rmsnorm eps must be >= 0, got {eps}")));
    }
    if x.is_empty() {
        return Ok(Vector::zeros(0));
    }
    let ms = x.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64;
    let denom = (ms + eps).sqrt();
    if denom == 0.0 {
        // 0/0: the all-zero input maps to zero.
        return Ok(Vector::zeros(x.len()));
    }
    let out = x
        .data
        .iter()
        .zip(&gain.data)
        .map(|(&v, &g)| (g as f64 * v as f64 / denom) as f32)
        .collect();
    Vector::new(out)
}

pub fn relu(x: &Vector) -> Vector {
    Vector {
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// `W x` with `f64` accumulation.
pub fn matvec(w: &Matrix, x: &Vector) -> Result<Vector> {
    matvec_f64(w, &x.data.iter().map(|&v| v as f64).collect::<Vec<_>>())
        .map(|out| Vector {
            data: out.into_iter().map(|v| v as f32).collect(),
        })
}

/// `W x` for an `f64` input, returned in `f64`.
pub fn matvec_f64(w: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if w.cols != x.len() {
        return Err(Error::dim(format!(
            "matvec: matrix has {} columns, vector has {} entries",
            w.cols,
            x.len()
        )));
    }
    Ok((0..w.rows)
        .map(|i| dot_f32_f64(w.row(i), x))
        .collect())
}

pub(crate) fn dot_f32_f64(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&u, &v)| u as f64 * v).sum()
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic random stream identified by `(root_seed, key)`.
///
/// The key is hashed together with the root seed into a ChaCha8 key, so the
/// sequence for one key never depends on how many other streams exist or in
/// which order they are consumed.
#[derive(Debug, Clone)]
pub struct RngStream {
    root_seed: u64,
    key: String,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(root_seed: u64, key: impl Into<String>) -> Self {
        let key = key.into();
        let mut state = root_seed ^ fnv1a64(key.as_bytes()).rotate_left(17);
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        RngStream {
            root_seed,
            key,
            rng: ChaCha8Rng::from_seed(seed),
        }
    }

    /// A new stream whose key is `"{self.key}/{suffix}"`.
    pub fn derive(&self, suffix: impl std::fmt::Display) -> RngStream {
        RngStream::new(self.root_seed, format!("{}/{}", self.key, suffix))
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// `true` with probability `prob`.
    pub fn bernoulli(&mut self, prob: f64) -> bool {
        self.uniform() < prob
    }

    /// Uniform index in `0..n` (n > 0).
    pub fn index(&mut self, n: usize) -> usize {
        // Lemire's multiply-shift; bias is below 2^-32 for the sizes used here.
        ((self.rng.next_u64() >> 32) * n as u64 >> 32) as usize
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Matrix of independent Bernoulli(`keep_prob`) indicators.
pub fn bernoulli_mask(rows: usize, cols: usize, keep_prob: f64, stream: &mut RngStream) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(Error::domain(format!("keep probability {keep_prob} outside [0, 1]")));
    }
    let data = (0..rows * cols)
        .map(|_| if stream.bernoulli(keep_prob) { 1.0 } else { 0.0 })
        .collect();
    Ok(Matrix { rows, cols, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn rmsnorm_fixed_point_and_zero() {
        let ones = Vector::ones(4);
        let out = rmsnorm(&ones, &ones, 1e-12).unwrap();
        assert!(approx(out.data(), &[1.0; 4], 1e-6));

        let z = Vector::zeros(2);
        let out = rmsnorm(&z, &Vector::ones(2), 1e-6).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn rmsnorm_three_four() {
        let x = Vector::new(vec![3.0, 4.0]).unwrap();
        let out = rmsnorm(&x, &Vector::ones(2), 0.0).unwrap();
        // scalar reference: rms = sqrt((9 + 16) / 2)
        let rms = (12.5f64).sqrt();
        let expect = [(3.0 / rms) as f32, (4.0 / rms) as f32];
        assert!(approx(out.data(), &expect, 1e-6));
        assert!(approx(out.data(), &[0.8485, 1.1314], 1e-4));
    }

    #[test]
    fn rmsnorm_length_mismatch() {
        let err = rmsnorm(&Vector::ones(3), &Vector::ones(2), RMSNORM_EPS).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn relu_cases() {
        let x = Vector::new(vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Vector::new(vec![-3.0, -0.5]).unwrap();
        assert_eq!(relu(&neg).data(), &[0.0, 0.0]);
        let pos = Vector::new(vec![0.0, 1.5, 7.0]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn matvec_cases() {
        let x = Vector::new(vec![1.0, 1.0]).unwrap();
        let w = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matvec(&w, &x).unwrap().data(), &[3.0, 7.0]);
        let y = Vector::new(vec![0.25, -2.0]).unwrap();
        assert_eq!(matvec(&Matrix::identity(2), &y).unwrap(), y);
        assert_eq!(matvec(&Matrix::zeros(3, 2), &y).unwrap().data(), &[0.0; 3]);
        assert!(matches!(matvec(&Matrix::zeros(3, 3), &y), Err(Error::Dimension(_))));
    }

    #[test]
    fn matvec_matches_triple_loop() {
        let mut rng = RngStream::new(3, "matvec");
        let n = 64;
        let w = Matrix::from_fn(n, n, |_, _| (rng.uniform() * 2.0 - 1.0) as f32);
        let x = Vector::new((0..n).map(|_| (rng.uniform() * 2.0 - 1.0) as f32).collect()).unwrap();
        let got = matvec(&w, &x).unwrap();
        for i in 0..n {
            let mut acc = 0.0f64;
            for j in 0..n {
                acc += w.get(i, j) as f64 * x.data()[j] as f64;
            }
            let rel = ((got.data()[i] as f64 - acc) / acc.abs().max(1e-12)).abs();
            assert!(rel <= 1e-5, "row {i}: rel err {rel}");
        }
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(Matrix::new(1, 1, vec![f32::NAN]), Err(Error::NonFinite(_))));
        assert!(matches!(Vector::new(vec![f32::INFINITY]), Err(Error::NonFinite(_))));
        assert!(matches!(Matrix::new(2, 2, vec![0.0; 3]), Err(Error::Dimension(_))));
    }

    #[test]
    fn bernoulli_mask_extremes() {
        let mut s = RngStream::new(1, "m");
        assert!(bernoulli_mask(4, 5, 1.0, &mut s).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(bernoulli_mask(4, 5, 0.0, &mut s).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(bernoulli_mask(1, 1, 1.5, &mut s), Err(Error::Domain(_))));
        assert!(matches!(bernoulli_mask(1, 1, -0.1, &mut s), Err(Error::Domain(_))));
    }

    #[test]
    fn bernoulli_mask_rate() {
        let mut s = RngStream::new(11, "rate");
        let m = bernoulli_mask(1000, 1000, 0.3, &mut s).unwrap();
        let frac = m.data().iter().filter(|&&v| v == 1.0).count() as f64 / 1e6;
        assert!((frac - 0.3).abs() <= 0.005, "kept fraction {frac}");
    }

    #[test]
    fn streams_are_deterministic_and_order_independent() {
        let mut a1 = RngStream::new(42, "fc1.weight");
        let mut b1 = RngStream::new(42, "out.weight");
        let seq_a: Vec<u64> = (0..16).map(|_| a1.next_u64()).collect();
        let _ = (0..16).map(|_| b1.next_u64()).count();

        let mut b2 = RngStream::new(42, "out.weight");
        let _ = (0..1000).map(|_| b2.next_u64()).count();
        let mut a2 = RngStream::new(42, "fc1.weight");
        let seq_a2: Vec<u64> = (0..16).map(|_| a2.next_u64()).collect();
        assert_eq!(seq_a, seq_a2);

        let mut other = RngStream::new(43, "fc1.weight");
        assert_ne!(seq_a[0], other.next_u64());
    }

    #[test]
    fn distinct_keys_pass_chi_square_independence() {
        // 2x2 contingency table of paired Bernoulli(0.5) draws, 1 dof,
        // critical value 6.635 at alpha = 0.01.
        let n = 100_000;
        let mut s1 = RngStream::new(7, "layer.a");
        let mut s2 = RngStream::new(7, "layer.b");
        let mut counts = [[0f64; 2]; 2];
        for _ in 0..n {
            let a = s1.bernoulli(0.5) as usize;
            let b = s2.bernoulli(0.5) as usize;
            counts[a][b] += 1.0;
        }
        let row: Vec<f64> = counts.iter().map(|r| r[0] + r[1]).collect();
        let col: Vec<f64> = (0..2).map(|j| counts[0][j] + counts[1][j]).collect();
        let mut chi2 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let e = row[i] * col[j] / n as f64;
                chi2 += (counts[i][j] - e).powi(2) / e;
            }
        }
        assert!(chi2 < 6.635, "chi-square {chi2}");
    }

    #[test]
    fn index_in_range() {
        let mut s = RngStream::new(0, "idx");
        for n in [1usize, 2, 7, 1000] {
            for _ in 0..200 {
                assert!(s.index(n) < n);
            }
        }
    }
}
