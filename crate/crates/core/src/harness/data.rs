use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::RngStream;

pub const DATASET_MAGIC: &[u8; 4] = b"DPDS";
pub const DATASET_VERSION: u16 = 1;

/// Row-major samples. `classes == 0` marks an unlabeled set whose labels
/// are all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    classes: usize,
    x: Vec<f64>,
    y: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, x: Vec<f64>, y: Vec<usize>) -> Result<Self> {
        if dim == 0 || x.len() != dim * y.len() {
            return Err(Error::dim(format!("{} values for {} samples of dim {dim}", x.len(), y.len())));
        }
        if classes == 0 {
            if y.iter().any(|&l| l != 0) {
                return Err(Error::domain("unlabeled dataset with nonzero labels"));
            }
        } else if let Some(bad) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::domain(format!("label {bad} out of range for {classes} classes")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Dataset { dim, classes, x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn is_labeled(&self) -> bool {
        self.classes > 0
    }

    /// Same features with the labels stripped.
    pub fn unlabeled(&self) -> Dataset {
        Dataset {
            dim: self.dim,
            classes: 0,
            x: self.x.clone(),
            y: vec![0; self.y.len()],
        }
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.y[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn inputs(&self) -> Vec<&[f64]> {
        self.x.chunks_exact(self.dim).collect()
    }

    /// Samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            x.extend_from_slice(self.sample(i));
        }
        Dataset {
            dim: self.dim,
            classes: self.classes,
            x,
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    pub fn head(&self, n: usize) -> Dataset {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// Flat binary form: magic, u16 version, u32 samples, u32 dim, u16
    /// classes, row-major f32 features, u16 labels. Little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        if self.classes > u16::MAX as usize {
            return Err(Error::domain("more than 65535 classes"));
        }
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.classes as u16).to_le_bytes())?;
        for v in &self.x {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        for l in &self.y {
            w.write_all(&(*l as u16).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Dataset> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let bad = |m: &str| Error::CorruptContainer(format!("dataset: {m}"));
        if buf.len() < 16 || &buf[..4] != DATASET_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != DATASET_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(buf[10..14].try_into().unwrap()) as usize;
        let classes = u16::from_le_bytes([buf[14], buf[15]]) as usize;
        let expect = n
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(n * 2 + 16))
            .ok_or_else(|| bad("size overflow"))?;
        if buf.len() != expect {
            return Err(bad(&format!("expected {expect} bytes, found {}", buf.len())));
        }
        let feat_end = 16 + n * dim * 4;
        let x = buf[16..feat_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let y = buf[feat_end..]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
            .collect();
        Dataset::new(dim, classes, x, y).map_err(|e| bad(&e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes)?;
        crate::checkpoint::container::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::read_from(std::fs::File::open(path)?)
    }
}

/// Train/validation/test splits of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Which of the paired mixtures to draw: the pretraining task or the shifted,
/// relabeled fine-tuning task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    /// Gaussian clusters, several per class, passed through a fixed
    /// per-feature scale and offset shared by both phases.
    GaussianMixture {
        classes: usize,
        dim: usize,
        /// Leading dimensions that carry class signal; the rest are noise.
        informative: usize,
        clusters_per_class: usize,
        /// Standard deviation of cluster centers.
        separation: f64,
        /// Within-cluster standard deviation.
        noise: f64,
        /// Standard deviation of the fine-tuning center shift.
        shift: f64,
        /// Number of classes whose labels are cycled in the fine-tuning
        /// phase (0 keeps every label).
        relabel: usize,
        /// Largest per-feature scale; scales are log-uniform in `[1/s, s]`.
        feature_scale: f64,
        /// Standard deviation of the per-feature offset.
        feature_offset: f64,
        n_train: usize,
        /// Training split size in the fine-tuning phase.
        n_finetune: usize,
        n_val: usize,
        n_test: usize,
        seed: u64,
    },
    /// Flat binary dataset files, one per split.
    Files { train: PathBuf, val: PathBuf, test: PathBuf },
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::GaussianMixture {
            classes: 10,
            dim: 64,
            informative: 64,
            clusters_per_class: 2,
            separation: 1.0,
            noise: 2.0,
            shift: 2.0,
            relabel: 0,
            feature_scale: 4.0,
            feature_offset: 2.0,
            n_train: 10_000,
            n_finetune: 1_000,
            n_val: 1_000,
            n_test: 2_000,
            seed: 2024,
        }
    }
}

impl TaskSpec {
    pub fn classes(&self) -> Result<usize> {
        match self {
            TaskSpec::GaussianMixture { classes, .. } => Ok(*classes),
            TaskSpec::Files { train, .. } => Ok(Dataset::load(train)?.classes()),
        }
    }

    /// Builds the splits for `phase`. Deterministic in the spec.
    pub fn generate(&self, phase: Phase) -> Result<TaskData> {
        match self {
            TaskSpec::Files { train, val, test } => {
                let data = TaskData {
                    train: Dataset::load(train)?,
                    val: Dataset::load(val)?,
                    test: Dataset::load(test)?,
                };
                if data.val.dim() != data.train.dim() || data.test.dim() != data.train.dim() {
                    return Err(Error::dim("dataset splits differ in feature dim"));
                }
                Ok(data)
            }
            TaskSpec::GaussianMixture {
                classes,
                dim,
                informative,
                clusters_per_class,
                separation,
                noise,
                shift,
                relabel,
                feature_scale,
                feature_offset,
                n_train,
                n_finetune,
                n_val,
                n_test,
                seed,
            } => {
                if *classes < 2 || *dim == 0 || *clusters_per_class == 0 {
                    return Err(Error::domain("mixture needs >= 2 classes, dim >= 1, >= 1 cluster"));
                }
                if !(*feature_scale >= 1.0) || !(*noise > 0.0) {
                    return Err(Error::domain("feature_scale must be >= 1 and noise > 0"));
                }
                let (k, d) = (*classes, *dim);
                let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
                let root = RngStream::new(*seed, "task");
                let mut feat = root.derive("features");
                let log_s = feature_scale.ln();
                let scale: Vec<f64> = (0..d).map(|_| ((feat.uniform() * 2.0 - 1.0) * log_s).exp()).collect();
                let offset: Vec<f64> = (0..d).map(|_| std_normal.sample(&mut feat) * feature_offset).collect();

                let n_centers = k * clusters_per_class;
                let mut cr = root.derive("centers");
                let mut centers: Vec<Vec<f64>> = (0..n_centers)
                    .map(|_| (0..d).map(|j| if j < *informative { std_normal.sample(&mut cr) * separation } else { 0.0 }).collect())
                    .collect();
                let mut center_label: Vec<usize> = (0..n_centers).map(|c| c / clusters_per_class).collect();
                if phase == Phase::Finetune {
                    let mut fr = root.derive("finetune");
                    for c in centers.iter_mut() {
                        c.iter_mut().take(*informative).for_each(|v| *v += std_normal.sample(&mut fr) * shift);
                    }
                    let mut order: Vec<usize> = (0..k).collect();
                    for i in (1..k).rev() {
                        order.swap(i, fr.index(i + 1));
                    }
                    let r = (*relabel).min(k);
                    let mut perm: Vec<usize> = (0..k).collect();
                    for i in 0..r {
                        perm[order[i]] = order[(i + 1) % r];
                    }
                    center_label.iter_mut().for_each(|l| *l = perm[*l]);
                }

                let phase_key = match phase {
                    Phase::Pretrain => "pretrain",
                    Phase::Finetune => "finetune",
                };
                let draw = |split: &str, n: usize| -> Result<Dataset> {
                    let mut r = root.derive(format!("{phase_key}/{split}"));
                    let mut x = Vec::with_capacity(n * d);
                    let mut y = Vec::with_capacity(n);
                    for _ in 0..n {
                        let c = r.index(n_centers);
                        for j in 0..d {
                            let v = centers[c][j] + std_normal.sample(&mut r) * noise;
                            x.push(v * scale[j] + offset[j]);
                        }
                        y.push(center_label[c]);
                    }
                    Dataset::new(d, k, x, y)
                };
                Ok(TaskData {
                    train: draw(
                        "train",
                        match phase {
                            Phase::Pretrain => *n_train,
                            Phase::Finetune => *n_finetune,
                        },
                    )?,
                    val: draw("val", *n_val)?,
                    test: draw("test", *n_test)?,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TaskSpec {
        TaskSpec::GaussianMixture {
            classes: 3,
            dim: 4,
            informative: 3,
            clusters_per_class: 2,
            separation: 1.0,
            noise: 0.5,
            shift: 0.5,
            relabel: 3,
            feature_scale: 3.0,
            feature_offset: 1.0,
            n_train: 50,
            n_finetune: 40,
            n_val: 10,
            n_test: 20,
            seed: 3,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = tiny().generate(Phase::Pretrain).unwrap();
        let b = tiny().generate(Phase::Pretrain).unwrap();
        assert_eq!(a, b);
        let f = tiny().generate(Phase::Finetune).unwrap();
        assert_ne!(a.train, f.train);
        assert_eq!(a.train.len(), 50);
        assert_eq!(a.test.dim(), 4);
    }

    #[test]
    fn splits_are_disjoint() {
        let t = tiny().generate(Phase::Finetune).unwrap();
        let rows = |d: &Dataset| d.inputs().into_iter().map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
        let (tr, va, te) = (rows(&t.train), rows(&t.val), rows(&t.test));
        for r in &va {
            assert!(!tr.contains(r));
        }
        for r in &te {
            assert!(!tr.contains(r) && !va.contains(r));
        }
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let d = Dataset::new(2, 3, vec![0.5, -1.0, 2.0, 0.25], vec![2, 0]).unwrap();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 4 * 4 + 2 * 2);
        assert_eq!(Dataset::read_from(&buf[..]).unwrap(), d);
        assert!(Dataset::read_from(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Dataset::read_from(&bad[..]).is_err());
        let mut bad_label = buf.clone();
        let n = bad_label.len();
        bad_label[n - 2] = 9;
        assert!(matches!(Dataset::read_from(&bad_label[..]), Err(Error::CorruptContainer(_))));
    }

    #[test]
    fn constructor_checks() {
        assert!(Dataset::new(2, 2, vec![0.0; 3], vec![0, 1]).is_err());
        assert!(Dataset::new(1, 2, vec![0.0, 1.0], vec![0, 2]).is_err());
        assert!(Dataset::new(1, 0, vec![0.0, 1.0], vec![0, 1]).is_err());
    }

    #[test]
    fn unlabeled_round_trip() {
        let t = tiny().generate(Phase::Finetune).unwrap();
        let u = t.val.unlabeled();
        assert!(!u.is_labeled() && t.val.is_labeled());
        let mut buf = Vec::new();
        u.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(&buf[..]).unwrap();
        let stored: Vec<f64> = u.x.iter().map(|&v| v as f32 as f64).collect();
        assert_eq!((back.dim, back.classes, &back.x, &back.y), (u.dim, 0, &stored, &u.y));
        assert!(matches!(crate::harness::evaluate(&crate::harness::TwoLayerNet::init(
            crate::harness::NetDims { input: 4, hidden: 2, output: 3 }, true, 0), &u), Err(Error::Precondition(_))));
    }
}
