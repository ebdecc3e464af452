//! Versioned binary checkpoints, little-endian throughout:
//! magic (8 bytes) | version u32 | config block (u32 length + key=value
//! text) | tensor count u32 | per tensor: name (u32 length + UTF-8),
//! rank u32, dims u32[rank], f32 data.
//!
//! Saves are atomic (write temp, then rename); loads refuse unknown magic
//! or version and report the byte offset of any corruption.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{teacher_seed, OptimizerState, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::objectives::TaskWeights;
use crate::rng::Rng;
use crate::teachers::{ClusterTeacher, FeatureTeacher, CLUSTER_TEMPERATURE};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CMMCK001";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Upper bound on a single tensor's element count when parsing untrusted
/// bytes.
const MAX_TENSOR_NUMEL: u64 = 1 << 28;
const MAX_BLOB: u64 = 1 << 26;

/// Raw checkpoint contents: a key=value config snapshot plus named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.off < n {
            return Err(Error::Format(format!(
                "checkpoint truncated at offset {}: needed {n} bytes for {what}",
                self.off
            )));
        }
        let out = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn utf8(&mut self, len: usize, what: &str) -> Result<String> {
        let off = self.off;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::Format(format!("invalid UTF-8 in {what} at offset {off}")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let mut cfg = String::new();
        for (k, v) in &self.config {
            let _ = writeln!(cfg, "{k}={v}");
        }
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parse untrusted bytes. Never panics; failure reports the offset.
    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, off: 0 };
        let magic = r.take(8, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "not a checkpoint: bad magic {:02x?} (expected {:02x?})",
                magic, CHECKPOINT_MAGIC
            )));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let cfg_len = r.u32("config length")? as u64;
        if cfg_len > MAX_BLOB {
            return Err(Error::Format(format!(
                "config block of {cfg_len} bytes is implausible (offset {})",
                r.off
            )));
        }
        let cfg_text = r.utf8(cfg_len as usize, "config block")?;
        let mut config = BTreeMap::new();
        for line in cfg_text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line without '=': {line:?}")))?;
            config.insert(k.to_string(), v.to_string());
        }
        let count = r.u32("tensor count")? as usize;
        if count as u64 > MAX_BLOB {
            return Err(Error::Format("implausible tensor count".into()));
        }
        let mut tensors = Vec::with_capacity(count.min(4096));
        for t in 0..count {
            let name_len = r.u32("tensor name length")? as u64;
            if name_len > 4096 {
                return Err(Error::Format(format!(
                    "tensor {t}: name of {name_len} bytes is implausible (offset {})",
                    r.off
                )));
            }
            let name = r.utf8(name_len as usize, "tensor name")?;
            let rank = r.u32("tensor rank")? as usize;
            if rank > 8 {
                return Err(Error::Format(format!(
                    "tensor {name}: rank {rank} unsupported (offset {})",
                    r.off
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: u64 = 1;
            for _ in 0..rank {
                let d = r.u32("tensor dim")? as u64;
                numel = numel.saturating_mul(d.max(1));
                shape.push(d as usize);
            }
            if numel > MAX_TENSOR_NUMEL {
                return Err(Error::Format(format!(
                    "tensor {name}: {numel} elements is implausible (offset {})",
                    r.off
                )));
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4, "tensor data")?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, shape, data));
        }
        if r.off != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint payload (offset {})",
                bytes.len() - r.off,
                r.off
            )));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.config
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint config missing key {key}")))
    }

    fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse::<T>()
            .map_err(|_| Error::Format(format!("checkpoint config key {key} unparsable")))
    }
}

/// The model-geometry keys shared by training and fine-tuned checkpoints.
pub fn model_config_snapshot(m: &ModelConfig, k_split: usize) -> BTreeMap<String, String> {
    let mut cfg = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        cfg.insert(k.to_string(), v);
    };
    put("model.vocab_size", m.vocab_size.to_string());
    put("model.hidden_dim", m.hidden_dim.to_string());
    put("model.num_heads", m.num_heads.to_string());
    put("model.total_layers", m.total_layers.to_string());
    put("model.text_layers_k", m.text_layers_k.to_string());
    put("model.image_patch_size", m.image_patch_size.to_string());
    put("model.image_side", m.image_side.to_string());
    put("model.proj_dim", m.proj_dim.to_string());
    put("model.max_text_len", m.max_text_len.to_string());
    put("model.mim_feat_dim", m.mim_feat_dim.to_string());
    put("model.mim_clusters", m.mim_clusters.to_string());
    put("run.k_split", k_split.to_string());
    cfg
}

fn config_snapshot(trainer: &Trainer) -> BTreeMap<String, String> {
    let t = &trainer.train_cfg;
    let w = &trainer.weights;
    let rng = trainer.rng.state();
    let mut cfg = model_config_snapshot(&trainer.state.config, trainer.state.k_split());
    let mut put = |k: &str, v: String| {
        cfg.insert(k.to_string(), v);
    };
    put("train.learning_rate", t.learning_rate.to_string());
    put("train.batch_size", t.batch_size.to_string());
    put("train.total_steps", t.total_steps.to_string());
    put("train.stage2_steps", t.stage2_steps.to_string());
    put("train.seed", t.seed.to_string());
    put("train.p_img_txt", t.p_img_txt.to_string());
    put("weights.mlm", w.mlm.to_string());
    put("weights.mim_kl", w.mim_kl.to_string());
    put("weights.mim_fr", w.mim_fr.to_string());
    put("weights.itc", w.itc.to_string());
    put("weights.itm", w.itm.to_string());
    put("weights.omni", w.omni.to_string());
    put("run.step", trainer.step.to_string());
    put("run.stage", trainer.stage.to_string());
    put("run.adam_step", trainer.opt.step.to_string());
    for (i, s) in rng.iter().enumerate() {
        put(&format!("run.rng{i}"), s.to_string());
    }
    put("run.pair_batches", trainer.pair_batches_taken.to_string());
    put("run.cross_batches", trainer.cross_batches_taken.to_string());
    cfg
}

/// Serialize the full training state and write it atomically.
pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    for p in trainer.state.params() {
        tensors.push((p.name.clone(), p.shape.clone(), p.data.clone()));
    }
    for (p, m) in trainer.state.params().iter().zip(&trainer.opt.m) {
        tensors.push((format!("opt.m.{}", p.name), p.shape.clone(), m.clone()));
    }
    for (p, v) in trainer.state.params().iter().zip(&trainer.opt.v) {
        tensors.push((format!("opt.v.{}", p.name), p.shape.clone(), v.clone()));
    }
    let ckpt = Checkpoint {
        config: config_snapshot(trainer),
        tensors,
    };
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Rebuild a model (weights only) from a checkpoint, e.g. for fine-tuning.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<ModelState<f32>> {
    let model_cfg = model_config_from(ckpt)?;
    let mut state = ModelState::<f32>::init(model_cfg, 0)?;
    let k: usize = ckpt.get_parsed("run.k_split")?;
    state.split_layers(k)?;
    restore_params(&mut state, ckpt)?;
    Ok(state)
}

pub fn model_config_from(ckpt: &Checkpoint) -> Result<ModelConfig> {
    let cfg = ModelConfig {
        vocab_size: ckpt.get_parsed("model.vocab_size")?,
        hidden_dim: ckpt.get_parsed("model.hidden_dim")?,
        num_heads: ckpt.get_parsed("model.num_heads")?,
        total_layers: ckpt.get_parsed("model.total_layers")?,
        text_layers_k: ckpt.get_parsed("model.text_layers_k")?,
        image_patch_size: ckpt.get_parsed("model.image_patch_size")?,
        image_side: ckpt.get_parsed("model.image_side")?,
        proj_dim: ckpt.get_parsed("model.proj_dim")?,
        max_text_len: ckpt.get_parsed("model.max_text_len")?,
        mim_feat_dim: ckpt.get_parsed("model.mim_feat_dim")?,
        mim_clusters: ckpt.get_parsed("model.mim_clusters")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn restore_params(state: &mut ModelState<f32>, ckpt: &Checkpoint) -> Result<()> {
    let by_name: BTreeMap<&str, (&Vec<usize>, &Vec<f32>)> = ckpt
        .tensors
        .iter()
        .map(|(n, s, d)| (n.as_str(), (s, d)))
        .collect();
    for p in state.params_mut() {
        let (shape, data) = by_name
            .get(p.name.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {}", p.name)))?;
        if **shape != p.shape {
            return Err(Error::Format(format!(
                "tensor {}: shape {:?} does not match model {:?}",
                p.name, shape, p.shape
            )));
        }
        p.data = (*data).clone();
    }
    Ok(())
}

impl Trainer {
    /// Reconstruct the exact training state captured by `save_checkpoint`.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Trainer> {
        let model_cfg = model_config_from(ckpt)?;
        let train_cfg = TrainConfig {
            learning_rate: ckpt.get_parsed("train.learning_rate")?,
            batch_size: ckpt.get_parsed("train.batch_size")?,
            total_steps: ckpt.get_parsed("train.total_steps")?,
            stage2_steps: ckpt.get_parsed("train.stage2_steps")?,
            seed: ckpt.get_parsed("train.seed")?,
            p_img_txt: ckpt.get_parsed("train.p_img_txt")?,
        };
        train_cfg.validate()?;
        let weights = TaskWeights {
            mlm: ckpt.get_parsed("weights.mlm")?,
            mim_kl: ckpt.get_parsed("weights.mim_kl")?,
            mim_fr: ckpt.get_parsed("weights.mim_fr")?,
            itc: ckpt.get_parsed("weights.itc")?,
            itm: ckpt.get_parsed("weights.itm")?,
            omni: ckpt.get_parsed("weights.omni")?,
        };
        weights.validate()?;
        let mut state = ModelState::<f32>::init(model_cfg, 0)?;
        state.split_layers(ckpt.get_parsed("run.k_split")?)?;
        restore_params(&mut state, ckpt)?;

        let mut opt = OptimizerState::new(&state);
        opt.step = ckpt.get_parsed("run.adam_step")?;
        let by_name: BTreeMap<&str, (&Vec<usize>, &Vec<f32>)> = ckpt
            .tensors
            .iter()
            .map(|(n, s, d)| (n.as_str(), (s, d)))
            .collect();
        for (i, p) in state.params().iter().enumerate() {
            for (prefix, sink) in [("opt.m.", true), ("opt.v.", false)] {
                let name = format!("{prefix}{}", p.name);
                let (shape, data) = by_name
                    .get(name.as_str())
                    .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name}")))?;
                if **shape != p.shape {
                    return Err(Error::Format(format!("tensor {name}: shape mismatch")));
                }
                if sink {
                    opt.m[i] = (*data).clone();
                } else {
                    opt.v[i] = (*data).clone();
                }
            }
        }

        let rng = Rng::from_state([
            ckpt.get_parsed("run.rng0")?,
            ckpt.get_parsed("run.rng1")?,
            ckpt.get_parsed("run.rng2")?,
            ckpt.get_parsed("run.rng3")?,
        ]);
        let ts = teacher_seed(train_cfg.seed);
        Ok(Trainer {
            opt,
            rng,
            step: ckpt.get_parsed("run.step")?,
            stage: ckpt.get_parsed("run.stage")?,
            train_cfg,
            weights,
            feature_teacher: FeatureTeacher::new(
                ts,
                model_cfg.mim_feat_dim,
                model_cfg.pixel_count(),
            ),
            cluster_teacher: ClusterTeacher::new(
                ts,
                model_cfg.mim_clusters,
                model_cfg.image_side,
                CLUSTER_TEMPERATURE,
            ),
            pair_batches_taken: ckpt.get_parsed("run.pair_batches")?,
            cross_batches_taken: ckpt.get_parsed("run.cross_batches")?,
            state,
        })
    }
}
