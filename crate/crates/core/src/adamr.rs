//! Adam with a decay term that pulls parameters toward a fixed anchor
//! (the pretrained weights) instead of toward zero.
//!
//! The decay strength is divided by the mean bias-corrected second moment of
//! each tensor, so it tracks the scale of the adaptive step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    #[default]
    None,
    L2,
    L1,
}

impl Regularizer {
    pub fn name(&self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::L2 => "l2",
            Regularizer::L1 => "l1",
        }
    }
}

impl std::str::FromStr for Regularizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Regularizer::None),
            "l2" => Ok(Regularizer::L2),
            "l1" => Ok(Regularizer::L1),
            other => Err(Error::Usage(format!("unknown regularizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamRConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda: f64,
    pub reg: Regularizer,
    /// For L1: stop a coordinate at the anchor instead of stepping past it.
    pub l1_clamp: bool,
}

impl Default for AdamRConfig {
    fn default() -> Self {
        AdamRConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda: 0.0,
            reg: Regularizer::None,
            l1_clamp: false,
        }
    }
}

impl AdamRConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::domain(format!("learning rate {} must be >= 0", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::domain(format!("{name}={b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::domain(format!("eps={} must be > 0", self.eps)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::domain(format!("lambda={} must be >= 0", self.lambda)));
        }
        Ok(())
    }
}

/// First and second moments per tensor plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamRState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamRState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        AdamRState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.v
    }
}

fn check_shapes(label: &str, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::dim(format!("{label} shapes do not match parameters")));
    }
    Ok(())
}

/// Mean of the bias-corrected second moment, one value per tensor.
pub fn mean_second_moment(state: &AdamRState, cfg: &AdamRConfig) -> Result<Vec<f64>> {
    if state.t == 0 {
        return Err(Error::Precondition("no step taken yet".into()));
    }
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    Ok(state
        .v
        .iter()
        .map(|v| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 / bc2 })
        .collect())
}

/// One AdamR update of `params` in place.
///
/// Rejects non-finite gradients before touching any state.
pub fn step(
    params: &mut [Vec<f64>],
    grads: &[Vec<f64>],
    anchor: &[Vec<f64>],
    state: &mut AdamRState,
    cfg: &AdamRConfig,
) -> Result<()> {
    cfg.validate()?;
    check_shapes("gradient", params, grads)?;
    check_shapes("anchor", params, anchor)?;
    check_shapes("optimizer state", params, &state.m)?;
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient contains NaN or infinity".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, theta) in params.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[k], &mut state.v[k], &grads[k]);
        for j in 0..theta.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
        }
        let v_bar = if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 / bc2 };
        let decay = cfg.lr * cfg.lambda / (v_bar.sqrt() + cfg.eps);
        for j in 0..theta.len() {
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let d = theta[j] - anchor[k][j];
            let reg = match cfg.reg {
                Regularizer::None => 0.0,
                Regularizer::L2 => decay * d,
                Regularizer::L1 => {
                    let r = decay * sign(d);
                    if cfg.l1_clamp && r.abs() > d.abs() {
                        d
                    } else {
                        r
                    }
                }
            };
            theta[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps) + reg;
        }
    }
    Ok(())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::RngStream;

    fn cfg(reg: Regularizer, lambda: f64) -> AdamRConfig {
        AdamRConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda,
            reg,
            l1_clamp: false,
        }
    }

    #[test]
    fn scalar_hand_trace() {
        // t=1: m=0.01, v=1e-5, m_hat=0.1, v_hat=0.01, v_bar=0.01
        // adam = 0.1*0.1/(0.1+1e-8); reg = 0.1*0.01/(0.1+1e-8)*1
        let c = cfg(Regularizer::L2, 0.01);
        let mut p = vec![vec![1.0]];
        let mut s = AdamRState::new([1]);
        step(&mut p, &[vec![0.1]], &[vec![0.0]], &mut s, &c).unwrap();
        let expect = 1.0 - 0.01 / (0.1 + 1e-8) - 0.001 / (0.1 + 1e-8);
        assert!((p[0][0] - expect).abs() < 1e-7, "{}", p[0][0]);
        assert!((p[0][0] - 0.89).abs() < 1e-6);
        assert_eq!(s.t(), 1);
    }

    #[test]
    fn anchor_fixed_point_has_no_decay() {
        for reg in [Regularizer::L1, Regularizer::L2] {
            let c = cfg(reg, 5.0);
            let anchor = vec![vec![0.3, -0.2]];
            let mut a = anchor.clone();
            let mut b = anchor.clone();
            let (mut s1, mut s2) = (AdamRState::new([2]), AdamRState::new([2]));
            let g = [vec![0.5, -1.0]];
            step(&mut a, &g, &anchor, &mut s1, &c).unwrap();
            step(&mut b, &g, &anchor, &mut s2, &cfg(Regularizer::None, 0.0)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mean_second_moment_cases() {
        let c = cfg(Regularizer::None, 0.0);
        let s = AdamRState::new([3]);
        assert!(mean_second_moment(&s, &c).is_err());
        let mut s = AdamRState::new([3, 2]);
        let mut p = vec![vec![0.0; 3], vec![0.0; 2]];
        step(&mut p, &[vec![2.0, 2.0, 2.0], vec![1.0, 3.0]], &[vec![0.0; 3], vec![0.0; 2]], &mut s, &c).unwrap();
        let vb = mean_second_moment(&s, &c).unwrap();
        assert!((vb[0] - 4.0).abs() < 1e-9);
        assert!((vb[1] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn mean_second_moment_reference_and_permutation() {
        let c = cfg(Regularizer::None, 0.0);
        let mut r = RngStream::new(4, "g");
        let g: Vec<f64> = (0..50).map(|_| r.uniform() - 0.5).collect();
        let mut rev = g.clone();
        rev.reverse();
        let run = |g: &Vec<f64>| {
            let mut s = AdamRState::new([50]);
            let mut p = vec![vec![0.0; 50]];
            step(&mut p, &[g.clone()], &[vec![0.0; 50]], &mut s, &c).unwrap();
            step(&mut p, &[g.clone()], &[vec![0.0; 50]], &mut s, &c).unwrap();
            mean_second_moment(&s, &c).unwrap()[0]
        };
        let a = run(&g);
        assert!((a - run(&rev)).abs() < 1e-15);
        // reference: v2 = b2(1-b2)g^2 + (1-b2)g^2, bias correction 1-b2^2
        let b2: f64 = 0.999;
        let reference = g.iter().map(|x| (b2 * (1.0 - b2) + (1.0 - b2)) * x * x / (1.0 - b2 * b2)).sum::<f64>() / 50.0;
        assert!((a - reference).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let c = cfg(Regularizer::None, 0.0);
        let mut s = AdamRState::new([2]);
        let mut p = vec![vec![0.0; 2]];
        assert!(matches!(
            step(&mut p, &[vec![f64::NAN, 0.0]], &[vec![0.0; 2]], &mut s, &c),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(s.t(), 0);
        assert!(matches!(step(&mut p, &[vec![0.0; 3]], &[vec![0.0; 2]], &mut s, &c), Err(Error::Dimension(_))));
        let bad = AdamRConfig { beta1: 1.0, ..c };
        assert!(step(&mut p, &[vec![0.0; 2]], &[vec![0.0; 2]], &mut s, &bad).is_err());
    }

    #[test]
    fn l1_moves_by_fixed_step_and_clamp_lands_on_anchor() {
        // zero gradients: v_bar = 0, decay = lr*lambda/eps
        let c = AdamRConfig { lr: 0.1, lambda: 0.3e-8, eps: 1e-8, reg: Regularizer::L1, ..cfg(Regularizer::L1, 0.0) };
        let step_size = 0.1 * 0.3;
        let anchor = vec![vec![0.0, 0.0, 0.0]];
        let mut p = vec![vec![0.1, -0.05, 0.0]];
        let mut s = AdamRState::new([3]);
        step(&mut p, &[vec![0.0; 3]], &anchor, &mut s, &c).unwrap();
        assert!((p[0][0] - (0.1 - step_size)).abs() < 1e-12);
        assert!((p[0][1] - (-0.05 + step_size)).abs() < 1e-12);
        assert_eq!(p[0][2], 0.0);
        for _ in 0..10 {
            let prev = p[0].clone();
            step(&mut p, &[vec![0.0; 3]], &anchor, &mut s, &c).unwrap();
            for (a, b) in prev.iter().zip(&p[0]) {
                if *a != 0.0 {
                    assert!((a - b).abs() - step_size < 1e-12);
                }
                if a * b < 0.0 {
                    assert!(b.abs() <= step_size);
                }
            }
        }
        let clamp = AdamRConfig { l1_clamp: true, ..c };
        let mut p = vec![vec![0.1, -0.05, 0.0]];
        let mut s = AdamRState::new([3]);
        for _ in 0..5 {
            step(&mut p, &[vec![0.0; 3]], &anchor, &mut s, &clamp).unwrap();
        }
        assert_eq!(p[0], vec![0.0, 0.0, 0.0]);
    }
}
