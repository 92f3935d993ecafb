use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::adamr::Regularizer;
use crate::checkpoint::container::{load_checkpoint, save_checkpoint};
use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::harness::data::{Phase, TaskData, TaskSpec};
use crate::harness::net::{NetDims, TwoLayerNet};
use crate::harness::train::{train, TrainConfig};
use crate::numkit::fnv1a64;

/// Everything that determines a trained model besides its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooConfig {
    pub task: TaskSpec,
    pub hidden: usize,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for ZooConfig {
    fn default() -> Self {
        ZooConfig {
            task: TaskSpec::default(),
            hidden: 64,
            pretrain: TrainConfig::default(),
            finetune: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
        }
    }
}

fn memory() -> &'static Mutex<HashMap<String, ModelCheckpoint>> {
    static CACHE: OnceLock<Mutex<HashMap<String, ModelCheckpoint>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Trains pretrained and fine-tuned models on demand and caches them in
/// memory (process-wide) and optionally on disk.
pub struct ModelZoo {
    config: ZooConfig,
    dir: Option<PathBuf>,
    require_existing: bool,
    pretrain_data: TaskData,
    finetune_data: TaskData,
}

impl ModelZoo {
    /// With `require_existing`, models must already be in `dir`.
    pub fn new(config: ZooConfig, dir: Option<PathBuf>, require_existing: bool) -> Result<Self> {
        if require_existing && dir.is_none() {
            return Err(Error::Usage("require_existing needs a model directory".into()));
        }
        let pretrain_data = config.task.generate(Phase::Pretrain)?;
        let finetune_data = config.task.generate(Phase::Finetune)?;
        Ok(ModelZoo {
            config,
            dir,
            require_existing,
            pretrain_data,
            finetune_data,
        })
    }

    pub fn config(&self) -> &ZooConfig {
        &self.config
    }

    pub fn pretrain_data(&self) -> &TaskData {
        &self.pretrain_data
    }

    pub fn finetune_data(&self) -> &TaskData {
        &self.finetune_data
    }

    pub fn dims(&self) -> NetDims {
        NetDims {
            input: self.pretrain_data.train.dim(),
            hidden: self.config.hidden,
            output: self.pretrain_data.train.classes(),
        }
    }

    fn key(&self, kind: &str, detail: serde_json::Value) -> String {
        let fp = serde_json::json!({ "config": self.config, "kind": kind, "detail": detail });
        format!("{kind}-{:016x}", fnv1a64(fp.to_string().as_bytes()))
    }

    fn get_or_train(&self, key: String, make: impl FnOnce() -> Result<ModelCheckpoint>) -> Result<ModelCheckpoint> {
        if let Some(c) = memory().lock().expect("zoo cache").get(&key) {
            return Ok(c.clone());
        }
        let path = self.dir.as_ref().map(|d| d.join(format!("{key}.dppx")));
        let ckpt = match &path {
            Some(p) if p.exists() => load_checkpoint(p)?,
            Some(p) if self.require_existing => {
                return Err(Error::MissingPrerequisite(format!("no checkpoint at {}", p.display())))
            }
            _ => {
                let c = make()?;
                if let Some(p) = &path {
                    if let Some(parent) = p.parent() {
                        std::fs::create_dir_all(parent)?;
                    }
                    save_checkpoint(p, &c)?;
                }
                c
            }
        };
        memory().lock().expect("zoo cache").insert(key, ckpt.clone());
        Ok(ckpt)
    }

    pub fn pretrained(&self, use_norm: bool, seed: u64) -> Result<ModelCheckpoint> {
        let key = self.key("pretrain", serde_json::json!({ "use_norm": use_norm, "seed": seed }));
        self.get_or_train(key, || {
            let mut net = TwoLayerNet::init(self.dims(), use_norm, seed);
            let cfg = TrainConfig {
                seed,
                ..self.config.pretrain
            };
            train(&mut net, &self.pretrain_data.train, None, &cfg)?;
            Ok(net.to_checkpoint())
        })
    }

    /// Fine-tunes the pretrained model of the same seed with AdamR anchored
    /// at the pretrained weights.
    pub fn finetuned(&self, use_norm: bool, seed: u64, reg: Regularizer, lambda: f64) -> Result<ModelCheckpoint> {
        let (reg, lambda) = if lambda == 0.0 { (Regularizer::None, 0.0) } else { (reg, lambda) };
        let lambda = if reg == Regularizer::None { 0.0 } else { lambda };
        let base = self.pretrained(use_norm, seed)?;
        let key = self.key(
            "finetune",
            serde_json::json!({ "use_norm": use_norm, "seed": seed, "reg": reg, "lambda": lambda }),
        );
        self.get_or_train(key, || {
            let mut net = TwoLayerNet::from_checkpoint(&base)?;
            let anchor = net.params().to_vec();
            let mut cfg = TrainConfig {
                seed: seed ^ 0x5eed_f17e,
                ..self.config.finetune
            };
            cfg.optimizer.reg = reg;
            cfg.optimizer.lambda = lambda;
            train(&mut net, &self.finetune_data.train, Some(&anchor), &cfg)?;
            Ok(net.to_checkpoint())
        })
    }
}
