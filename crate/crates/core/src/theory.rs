//! Influence statistics, concentration bounds on the pruning-induced output
//! change, the `q(eta)` objective and Monte-Carlo validators.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::CsrTensor;
use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};

pub const DEFAULT_GAMMA: f64 = 0.05;

/// Per-row statistics of influence coefficients `c_ij = dW_ij * x_j`.
///
/// A batch of inputs contributes one row per (sample, output neuron) pair,
/// sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceStats {
    pub sum_c: Vec<f64>,
    pub sum_c2: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of coefficients per row (the input dimension).
    pub n: usize,
}

impl InfluenceStats {
    /// Builds statistics from explicit coefficient rows of equal length.
    pub fn from_coeffs<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut s = InfluenceStats::with_capacity(rows.len(), n);
        for r in rows {
            let r = r.as_ref();
            if r.len() != n {
                return Err(Error::dim(format!("coefficient rows of length {n} and {}", r.len())));
            }
            s.push_row(r.iter().sum(), r.iter().map(|c| c * c).sum());
        }
        Ok(s)
    }

    fn with_capacity(rows: usize, n: usize) -> Self {
        InfluenceStats {
            sum_c: Vec::with_capacity(rows),
            sum_c2: Vec::with_capacity(rows),
            mean: Vec::with_capacity(rows),
            var: Vec::with_capacity(rows),
            n,
        }
    }

    fn push_row(&mut self, sum_c: f64, sum_c2: f64) {
        let (mean, var) = if self.n == 0 {
            (0.0, 0.0)
        } else {
            let mean = sum_c / self.n as f64;
            (mean, (sum_c2 / self.n as f64 - mean * mean).max(0.0))
        };
        self.sum_c.push(sum_c);
        self.sum_c2.push(sum_c2);
        self.mean.push(mean);
        self.var.push(var);
    }

    pub fn rows(&self) -> usize {
        self.sum_c.len()
    }

    /// Appends the rows of `other`, which must share `n`.
    pub fn extend(&mut self, other: &InfluenceStats) -> Result<()> {
        if self.rows() > 0 && other.rows() > 0 && self.n != other.n {
            return Err(Error::dim(format!("input dims {} and {}", self.n, other.n)));
        }
        if self.rows() == 0 {
            self.n = other.n;
        }
        self.sum_c.extend(&other.sum_c);
        self.sum_c2.extend(&other.sum_c2);
        self.mean.extend(&other.mean);
        self.var.extend(&other.var);
        Ok(())
    }
}

/// Influence statistics of `dw` for one input vector.
pub fn influence_stats(dw: &Matrix, x: &[f64]) -> Result<InfluenceStats> {
    if x.len() != dw.cols() {
        return Err(Error::dim(format!("matrix has {} columns, input has {}", dw.cols(), x.len())));
    }
    let mut s = InfluenceStats::with_capacity(dw.rows(), dw.cols());
    for i in 0..dw.rows() {
        let (mut sc, mut sc2) = (0.0, 0.0);
        for (w, xj) in dw.row(i).iter().zip(x) {
            let c = *w as f64 * xj;
            sc += c;
            sc2 += c * c;
        }
        s.push_row(sc, sc2);
    }
    Ok(s)
}

/// Influence statistics over a batch, rows concatenated sample-major.
pub fn influence_stats_batch<X: AsRef<[f64]>>(dw: &Matrix, batch: &[X]) -> Result<InfluenceStats> {
    let mut s = InfluenceStats::with_capacity(dw.rows() * batch.len(), dw.cols());
    for x in batch {
        s.extend(&influence_stats(dw, x.as_ref())?)?;
    }
    Ok(s)
}

/// `dW x - P(dW) x`, accumulated in f64.
pub fn h_diff(dw: &Matrix, pruned: &CsrTensor, x: &[f64]) -> Result<Vec<f64>> {
    let shape = pruned.shape();
    if (shape.rows(), shape.cols()) != dw.shape() {
        return Err(Error::dim(format!(
            "delta is {}x{}, pruned delta is {shape}",
            dw.rows(),
            dw.cols()
        )));
    }
    if x.len() != dw.cols() {
        return Err(Error::dim(format!("matrix has {} columns, input has {}", dw.cols(), x.len())));
    }
    let mut h: Vec<f64> = (0..dw.rows())
        .map(|i| dw.row(i).iter().zip(x).map(|(w, xj)| *w as f64 * xj).sum())
        .collect();
    for (i, j, v) in pruned.iter() {
        h[i] -= v as f64 * x[j];
    }
    Ok(h)
}

fn check_open_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("{name}={v} outside (0, 1)")))
    }
}

/// `(1 - 2p) / log((1 - p) / p)`, continuous at `p = 1/2` where it equals `1/2`.
pub fn phi(p: f64) -> Result<f64> {
    check_open_unit("p", p)?;
    let d = p - 0.5;
    if d.abs() < 1e-4 {
        // (1-2p)/log((1-p)/p) = 1/2 - (2/3) d^2 + O(d^4)
        return Ok(0.5 - 2.0 / 3.0 * d * d);
    }
    Ok((1.0 - 2.0 * p) / ((1.0 - p) / p).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Chebyshev,
    Hoeffding,
    KearnsSaul,
    BerendKontorovich,
}

/// Multiplier of `sqrt(sum_j c_ij^2)` in the high-probability bound on `|h_diff_i|`.
pub fn bound_factor(kind: BoundKind, p: f64, gamma: f64) -> Result<f64> {
    check_open_unit("p", p)?;
    check_open_unit("gamma", gamma)?;
    let log_term = (2.0 / gamma).ln();
    Ok(match kind {
        BoundKind::Chebyshev => (p / ((1.0 - p) * gamma)).sqrt(),
        BoundKind::Hoeffding => std::f64::consts::FRAC_1_SQRT_2 * log_term.sqrt() / (1.0 - p),
        BoundKind::KearnsSaul => (phi(p)? * log_term).sqrt() / (1.0 - p),
        BoundKind::BerendKontorovich => {
            if p < 0.5 {
                return Err(Error::domain(format!("Berend-Kontorovich bound needs p >= 1/2, got {p}")));
            }
            (2.0 * p * (1.0 - p) * log_term).sqrt() / (1.0 - p)
        }
    })
}

/// Which form of the combined bound to use below `p = 1/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundVariant {
    /// `sqrt(phi(p))`, as the tail argument yields.
    #[default]
    SqrtPhi,
    /// `phi(p)` without the square root.
    Psi,
}

/// Combined factor: Kearns-Saul for `p <= 1/2`, Berend-Kontorovich above.
pub fn theorem1_factor(p: f64, gamma: f64, variant: BoundVariant) -> Result<f64> {
    check_open_unit("p", p)?;
    check_open_unit("gamma", gamma)?;
    if p > 0.5 {
        return bound_factor(BoundKind::BerendKontorovich, p, gamma);
    }
    match variant {
        BoundVariant::SqrtPhi => bound_factor(BoundKind::KearnsSaul, p, gamma),
        BoundVariant::Psi => Ok(phi(p)? * (2.0 / gamma).ln().sqrt() / (1.0 - p)),
    }
}

/// Per-row bound on `|h_diff|` for DARE at drop rate `p`, holding with
/// probability at least `1 - gamma`.
pub fn theorem1_bound(p: f64, gamma: f64, stats: &InfluenceStats, variant: BoundVariant) -> Result<Vec<f64>> {
    let f = theorem1_factor(p, gamma, variant)?;
    Ok(stats.sum_c2.iter().map(|s| f * s.sqrt()).collect())
}

/// `|log(2/gamma) + eta (1 - (1-p)/q) sum_c + eta^2 phi(p) sum_c2 / (4 q^2)|`.
pub fn q_eta_objective(q: f64, eta: f64, p: f64, gamma: f64, sum_c: f64, sum_c2: f64) -> Result<f64> {
    if !(q > 0.0 && q.is_finite()) {
        return Err(Error::domain(format!("q must be > 0, got {q}")));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::domain(format!("eta must be > 0, got {eta}")));
    }
    check_open_unit("gamma", gamma)?;
    let ph = phi(p)?;
    Ok(((2.0 / gamma).ln() + eta * (1.0 - (1.0 - p) / q) * sum_c + eta * eta * ph * sum_c2 / (4.0 * q * q)).abs())
}

/// Grid `q_t = 1 - p + t dq` for `t = 1..=rounds`.
pub fn q_grid(p: f64, dq: f64, rounds: usize) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::domain(format!("p={p} outside [0, 1)")));
    }
    if !(dq > 0.0 && dq.is_finite()) {
        return Err(Error::domain(format!("grid step must be > 0, got {dq}")));
    }
    if rounds == 0 {
        return Err(Error::Empty("q grid with zero rounds".into()));
    }
    let grid: Vec<f64> = (1..=rounds).map(|t| 1.0 - p + t as f64 * dq).collect();
    if grid[rounds - 1] > Q_GRID_MAX {
        return Err(Error::domain(format!(
            "grid reaches q={} above {Q_GRID_MAX}",
            grid[rounds - 1]
        )));
    }
    Ok(grid)
}

/// Largest admissible rescale divisor on a search grid.
pub const Q_GRID_MAX: f64 = 2.0;

/// Mean of [`q_eta_objective`] over the rows of `stats`.
pub fn q_eta_mean_objective(q: f64, eta: f64, p: f64, gamma: f64, stats: &InfluenceStats) -> Result<f64> {
    if stats.rows() == 0 {
        return q_eta_objective(q, eta, p, gamma, 0.0, 0.0);
    }
    let mut acc = 0.0;
    for (sc, sc2) in stats.sum_c.iter().zip(&stats.sum_c2) {
        acc += q_eta_objective(q, eta, p, gamma, *sc, *sc2)?;
    }
    Ok(acc / stats.rows() as f64)
}

/// Grid argmin of the mean objective; ties go to the smallest `q`.
/// Returns `(q, objective)`.
pub fn q_eta_minimize(eta: f64, p: f64, gamma: f64, stats: &InfluenceStats, grid: &[f64]) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(Error::Empty("q grid".into()));
    }
    if let Some(q) = grid.iter().find(|&&q| q < 1.0 - p) {
        return Err(Error::domain(format!("grid point q={q} below 1-p={}", 1.0 - p)));
    }
    let mut best: Option<(f64, f64)> = None;
    for &q in grid {
        let v = q_eta_mean_objective(q, eta, p, gamma, stats)?;
        let better = match best {
            None => true,
            Some((bq, bv)) => v < bv || (v == bv && q < bq),
        };
        if better {
            best = Some((q, v));
        }
    }
    Ok(best.expect("nonempty grid"))
}

/// Fraction of independent drop masks (keep probability `1 - p`, rescale
/// `1/q`) for which `|sum_j c_j (1 - m_j / q)|` exceeds `bound`.
pub fn mc_violation_rate(coeffs: &[f64], p: f64, q: f64, bound: f64, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Precondition("at least one trial required".into()));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::domain(format!("p={p} outside [0, 1)")));
    }
    if !(q > 0.0) {
        return Err(Error::domain(format!("q must be > 0, got {q}")));
    }
    let total: f64 = coeffs.iter().sum();
    let keep = 1.0 - p;
    let hits = (0..trials)
        .into_par_iter()
        .filter(|&t| {
            let mut s = RngStream::new(seed, format!("mc/{t}"));
            let kept: f64 = coeffs.iter().filter(|_| s.bernoulli(keep)).sum();
            (total - kept / q).abs() > bound
        })
        .count();
    Ok(hits as f64 / trials as f64)
}

/// One row of the bound-versus-`p` table. `bk` is `None` for `p < 1/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsRow {
    pub p: f64,
    pub chebyshev: f64,
    pub hoeffding: f64,
    pub ks: f64,
    pub bk: Option<f64>,
}

/// Bound factors for each `p`, multiplied by `scale` (a `sqrt(sum c^2)`).
pub fn bounds_table(p_grid: &[f64], gamma: f64, scale: f64) -> Result<Vec<BoundsRow>> {
    p_grid
        .iter()
        .map(|&p| {
            Ok(BoundsRow {
                p,
                chebyshev: scale * bound_factor(BoundKind::Chebyshev, p, gamma)?,
                hoeffding: scale * bound_factor(BoundKind::Hoeffding, p, gamma)?,
                ks: scale * bound_factor(BoundKind::KearnsSaul, p, gamma)?,
                bk: if p >= 0.5 {
                    Some(scale * bound_factor(BoundKind::BerendKontorovich, p, gamma)?)
                } else {
                    None
                },
            })
        })
        .collect()
}

/// CSV with columns `p, chebyshev, hoeffding, ks, bk`.
pub fn write_bounds_csv<W: Write>(rows: &[BoundsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Shape;
    use proptest::prelude::*;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = RngStream::new(seed, "m");
        Matrix::from_fn(rows, cols, |_, _| (r.uniform() * 2.0 - 1.0) as f32)
    }

    #[test]
    fn stats_hand_and_zero() {
        let s = influence_stats(&Matrix::new(1, 2, vec![1.0, 1.0]).unwrap(), &[1.0, -1.0]).unwrap();
        assert_eq!((s.mean[0], s.var[0], s.sum_c2[0]), (0.0, 1.0, 2.0));
        let z = influence_stats(&Matrix::zeros(3, 4), &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(z.sum_c.iter().chain(&z.sum_c2).chain(&z.mean).chain(&z.var).all(|v| *v == 0.0));
        assert!(matches!(influence_stats(&Matrix::zeros(2, 2), &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn stats_match_reference_loop() {
        let w = rand_matrix(16, 16, 1);
        let x: Vec<f64> = (0..16).map(|j| (j as f64 * 0.37).sin()).collect();
        let s = influence_stats(&w, &x).unwrap();
        for i in 0..16 {
            let c: Vec<f64> = (0..16).map(|j| w.get(i, j) as f64 * x[j]).collect();
            let mean = c.iter().sum::<f64>() / 16.0;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!((s.mean[i] - mean).abs() < 1e-6);
            assert!((s.var[i] - var).abs() < 1e-6);
            let rebuilt = 16.0 * (s.mean[i].powi(2) + s.var[i]);
            assert!((rebuilt - s.sum_c2[i]).abs() <= 1e-6 * s.sum_c2[i].max(1e-12));
        }
    }

    #[test]
    fn h_diff_extremes() {
        let w = rand_matrix(4, 5, 2);
        let x = vec![0.5, -1.0, 2.0, 0.0, 1.5];
        let full = CsrTensor::from_dense_where(Shape::Matrix(4, 5), w.data(), |_, _| true);
        assert!(h_diff(&w, &full, &x).unwrap().iter().all(|h| *h == 0.0));
        let empty = CsrTensor::from_dense_where(Shape::Matrix(4, 5), w.data(), |_, _| false);
        let h = h_diff(&w, &empty, &x).unwrap();
        for i in 0..4 {
            let wx: f64 = (0..5).map(|j| w.get(i, j) as f64 * x[j]).sum();
            assert_eq!(h[i], wx);
        }
    }

    #[test]
    fn phi_values() {
        assert_eq!(phi(0.5).unwrap(), 0.5);
        for d in [1e-6, -1e-6] {
            let p: f64 = 0.5 + d;
            let direct = (1.0 - 2.0 * p) / ((1.0 - p) / p).ln();
            assert!((phi(p).unwrap() - direct).abs() < 1e-9);
        }
        // continuity across the series switch
        for p in [0.5 - 1e-4, 0.5 + 1e-4] {
            let a = phi(p - 1e-12).unwrap();
            let b = phi(p + 1e-12).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
        // decays like 1/log(1/p) at both ends
        let mut prev = 0.5;
        for k in 1..=12 {
            let p = 10f64.powi(-k);
            let (lo, hi) = (phi(p).unwrap(), phi(1.0 - p).unwrap());
            assert!(lo < prev && (lo - hi).abs() < 1e-3 * lo.max(1e-3));
            if k >= 3 {
                assert!((lo * (1.0 / p).ln() - 1.0).abs() < 1e-2);
            }
            prev = lo;
        }
        assert!(phi(1e-300).unwrap() < 2e-3);
        assert!((phi(0.9).unwrap() - (-0.8 / (1.0f64 / 9.0).ln())).abs() < 1e-12);
        assert!((phi(0.9).unwrap() - 0.3641).abs() < 1e-4);
        assert!(phi(0.0).is_err() && phi(1.0).is_err());
    }

    #[test]
    fn factor_hand_values() {
        let gamma = 2.0 / std::f64::consts::E; // log(2/gamma) = 1
        let h = bound_factor(BoundKind::Hoeffding, 0.5, gamma).unwrap();
        assert!((h - 2f64.sqrt()).abs() < 1e-12);
        let bk = bound_factor(BoundKind::BerendKontorovich, 0.99, gamma).unwrap();
        assert!((bk - 14.071).abs() < 1e-3, "{bk}");
        assert!(matches!(bound_factor(BoundKind::BerendKontorovich, 0.3, 0.05), Err(Error::Domain(_))));
        assert!(bound_factor(BoundKind::Hoeffding, 0.5, 2.0).is_err());
    }

    #[test]
    fn ordering_over_grid() {
        for k in 1..100 {
            let p = k as f64 / 100.0;
            assert!(phi(p).unwrap() <= 0.5);
            let ks = bound_factor(BoundKind::KearnsSaul, p, 0.05).unwrap();
            let ho = bound_factor(BoundKind::Hoeffding, p, 0.05).unwrap();
            assert!(ks <= ho);
            if p >= 0.5 {
                assert!(bound_factor(BoundKind::BerendKontorovich, p, 0.05).unwrap() <= ks);
            }
        }
    }

    #[test]
    fn theorem1_bound_homogeneous_and_monotone() {
        let s = InfluenceStats::from_coeffs(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let s2 = InfluenceStats::from_coeffs(&[vec![2.0, -4.0, 1.0]]).unwrap();
        let b1 = theorem1_bound(0.9, 0.05, &s, BoundVariant::SqrtPhi).unwrap()[0];
        let b2 = theorem1_bound(0.9, 0.05, &s2, BoundVariant::SqrtPhi).unwrap()[0];
        assert!((b2 - 2.0 * b1).abs() < 1e-12);
        let zero = InfluenceStats::from_coeffs(&[vec![0.0; 3]]).unwrap();
        assert_eq!(theorem1_bound(0.3, 0.05, &zero, BoundVariant::SqrtPhi).unwrap()[0], 0.0);
        let mut prev = 0.0;
        for k in 0..=499 {
            let p = 0.5 + k as f64 * 0.001;
            let f = theorem1_factor(p, 0.05, BoundVariant::SqrtPhi).unwrap();
            assert!(f >= prev);
            prev = f;
        }
        // both variants agree above one half
        assert_eq!(
            theorem1_factor(0.8, 0.05, BoundVariant::Psi).unwrap(),
            theorem1_factor(0.8, 0.05, BoundVariant::SqrtPhi).unwrap()
        );
    }

    #[test]
    fn objective_cases() {
        let l = (2.0f64 / 0.05).ln();
        assert_eq!(q_eta_objective(0.3, 2.0, 0.9, 0.05, 0.0, 0.0).unwrap(), l);
        let at = q_eta_objective(0.1, 1.5, 0.9, 0.05, 7.0, 3.0).unwrap();
        let expect = (l + 1.5f64.powi(2) * phi(0.9).unwrap() * 3.0 / (4.0 * 0.01)).abs();
        assert!((at - expect).abs() < 1e-9);
        assert!(q_eta_objective(0.0, 1.0, 0.9, 0.05, 1.0, 1.0).is_err());
        assert!(q_eta_objective(0.5, 0.0, 0.9, 0.05, 1.0, 1.0).is_err());
    }

    #[test]
    fn minimize_matches_dense_scan() {
        let (p, g, eta, sc, sc2) = (0.9, 0.05, 1.0, 10.0, 4.0);
        let stats = InfluenceStats { sum_c: vec![sc], sum_c2: vec![sc2], mean: vec![0.0], var: vec![0.0], n: 1 };
        let dq = 0.01;
        let grid = q_grid(p, dq, 40).unwrap();
        let (q, _) = q_eta_minimize(eta, p, g, &stats, &grid).unwrap();
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=100_000 {
            let qq = 0.1 + dq + (grid[39] - grid[0]) * k as f64 / 100_000.0;
            let v = q_eta_objective(qq, eta, p, g, sc, sc2).unwrap();
            if v < best.0 {
                best = (v, qq);
            }
        }
        assert!((q - best.1).abs() <= dq, "{q} vs dense {}", best.1);
    }

    #[test]
    fn constant_objective_returns_smallest() {
        let zero = InfluenceStats::from_coeffs(&[vec![0.0; 4]]).unwrap();
        let grid = q_grid(0.5, 0.1, 5).unwrap();
        assert_eq!(q_eta_minimize(1.0, 0.5, 0.05, &zero, &grid).unwrap().0, grid[0]);
        assert!(q_eta_minimize(1.0, 0.5, 0.05, &zero, &[]).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(q_grid(0.9, 0.05, 0).is_err());
        assert!(q_grid(0.9, 0.0, 3).is_err());
        assert!(q_grid(0.5, 0.5, 4).is_err());
        let g = q_grid(0.99, 0.005, 3).unwrap();
        assert!((g[2] - 0.025).abs() < 1e-12);
    }

    #[test]
    fn mc_rate_extremes() {
        let c = vec![1.0, -0.5, 2.0, 0.3];
        assert_eq!(mc_violation_rate(&c, 0.5, 0.5, f64::INFINITY, 200, 1).unwrap(), 0.0);
        let r = mc_violation_rate(&c, 0.5, 0.5, 0.0, 2000, 1).unwrap();
        // |h| = 0 only when the mask happens to give exactly zero change
        assert!(r > 0.9, "{r}");
        assert!(mc_violation_rate(&c, 0.5, 0.5, 1.0, 0, 1).is_err());
    }

    #[test]
    fn bounds_csv_layout() {
        let rows = bounds_table(&[0.1, 0.5, 0.9], 0.05, 1.0).unwrap();
        let mut buf = Vec::new();
        write_bounds_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "p,chebyshev,hoeffding,ks,bk");
        assert!(lines[1].ends_with(','));
        assert!(!lines[2].ends_with(','));
    }

    proptest! {
        #[test]
        fn minimize_equals_exhaustive(
            p in 0.05f64..0.995, eta in 1e-3f64..1e2,
            rows in prop::collection::vec((-50f64..50.0, 0f64..100.0), 1..6),
            rounds in 1usize..30,
        ) {
            let stats = InfluenceStats {
                sum_c: rows.iter().map(|r| r.0).collect(),
                sum_c2: rows.iter().map(|r| r.1).collect(),
                mean: vec![0.0; rows.len()],
                var: vec![0.0; rows.len()],
                n: 1,
            };
            let dq = (1.0 - p) / 2.0;
            let rounds = rounds.min((p / dq).floor() as usize).max(1);
            let grid = q_grid(p, dq, rounds).unwrap();
            let (q, v) = q_eta_minimize(eta, p, 0.05, &stats, &grid).unwrap();
            let vals: Vec<f64> = grid.iter().map(|&q| {
                rows.iter().map(|r| q_eta_objective(q, eta, p, 0.05, r.0, r.1).unwrap()).sum::<f64>() / rows.len() as f64
            }).collect();
            let m = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let first = vals.iter().position(|x| *x == m).unwrap();
            prop_assert_eq!(q, grid[first]);
            prop_assert_eq!(v, m);
        }
    }
}
