//! The pre-training driver: round-robin task-set scheduling, Adam, the
//! two-stage schedule with modality randomization, and checkpointing.
//!
//! A training run is a pure function of (seed, corpus, config): the rng
//! state, optimizer moments, and data-iterator positions all live in the
//! checkpoint, so an interrupted run resumed from disk replays the
//! uninterrupted run bit for bit.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, model_config_from, model_config_snapshot, model_from_checkpoint,
    save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use std::io::Write as _;
use std::path::Path;

use crate::data::{CrossPairDataset, PairDataset, PairInstance, QuadInstance};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState, Param};
use crate::objectives::{image_text_step_loss, omni_step_loss, StepLoss, TaskWeights};
use crate::rng::Rng;
use crate::teachers::{ClusterTeacher, FeatureTeacher, CLUSTER_TEMPERATURE};
use crate::tensor::Tape;

/// Global-norm gradient clip applied before every update.
pub const GRAD_CLIP: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub stage2_steps: u64,
    pub seed: u64,
    /// Probability of picking the image-text task set at each step.
    pub p_img_txt: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 32,
            total_steps: 2000,
            stage2_steps: 500,
            seed: 42,
            p_img_txt: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.total_steps == 0 || self.stage2_steps == 0 {
            return Err(Error::Config(
                "steps and batch size must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.p_img_txt) {
            return Err(Error::Config("p_img_txt must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// The two families of pre-training steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskSet {
    ImageText5,
    Omni9,
}

impl TaskSet {
    pub fn name(&self) -> &'static str {
        match self {
            TaskSet::ImageText5 => "image_text",
            TaskSet::Omni9 => "omni",
        }
    }
}

/// Bernoulli(p) choice between the two task sets.
pub fn round_robin_pick(rng: &mut Rng, p: f64) -> TaskSet {
    if rng.bernoulli(p) {
        TaskSet::ImageText5
    } else {
        TaskSet::Omni9
    }
}

/// Adam first/second moments aligned with [`ModelState::params`] order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(state: &ModelState<f32>) -> Self {
        Self::for_params(&state.params())
    }

    /// Zeroed moments sized for an arbitrary parameter list (e.g. model
    /// plus a fine-tuning head).
    pub fn for_params(params: &[&Param<f32>]) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        OptimizerState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m,
            v,
        }
    }
}

/// Rescale gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g {
            sq += v as f64 * v as f64;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// One bias-corrected Adam step over every parameter; gradients are zeroed
/// afterward.
pub fn adam_update(
    params: &mut [&mut Param<f32>],
    grads: &mut [Vec<f32>],
    opt: &mut OptimizerState,
    lr: f64,
) {
    assert_eq!(
        params.len(),
        grads.len(),
        "parameter/gradient count mismatch"
    );
    assert_eq!(params.len(), opt.m.len(), "optimizer state mismatch");
    opt.step += 1;
    let t = opt.step as f64;
    let bc1 = 1.0 - opt.beta1.powf(t);
    let bc2 = 1.0 - opt.beta2.powf(t);
    let (b1, b2) = (opt.beta1 as f32, opt.beta2 as f32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads.iter_mut())
        .zip(opt.m.iter_mut().zip(opt.v.iter_mut()))
    {
        assert_eq!(p.numel(), g.len(), "{}: gradient shape mismatch", p.name);
        for i in 0..g.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] as f64 / bc1;
            let v_hat = v[i] as f64 / bc2;
            p.data[i] -= (lr * m_hat / (v_hat.sqrt() + opt.eps)) as f32;
            g[i] = 0.0;
        }
    }
}

/// Per-step record written to the metrics log.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub step: u64,
    pub task_set: TaskSet,
    pub losses: Vec<(String, f64)>,
    /// f64 weighted sum of the components.
    pub total: f64,
    pub lr: f64,
    pub k: usize,
}

impl StepMetrics {
    pub fn to_json_line(&self) -> String {
        let losses: serde_json::Map<String, serde_json::Value> = self
            .losses
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::json!(v)))
            .collect();
        serde_json::json!({
            "step": self.step,
            "task_set": self.task_set.name(),
            "losses": losses,
            "total": self.total,
            "lr": self.lr,
            "K": self.k,
        })
        .to_string()
    }
}

/// A batch for one step, matching the chosen task set.
pub enum Batch {
    Pairs(Vec<PairInstance>),
    Quads(Vec<QuadInstance>),
}

/// Everything a training run mutates.
pub struct Trainer {
    pub state: ModelState<f32>,
    pub opt: OptimizerState,
    pub rng: Rng,
    pub step: u64,
    pub stage: u8,
    pub train_cfg: TrainConfig,
    pub weights: TaskWeights,
    pub feature_teacher: FeatureTeacher,
    pub cluster_teacher: ClusterTeacher,
    /// Batches drawn so far from each corpus iterator (for resume).
    pub pair_batches_taken: u64,
    pub cross_batches_taken: u64,
}

/// Teacher seed derived from the training seed (independent stream).
pub fn teacher_seed(train_seed: u64) -> u64 {
    train_seed ^ 0x7eac_4e5a_11ce_55ed
}

impl Trainer {
    pub fn new(
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        weights: TaskWeights,
        stage: u8,
    ) -> Result<Self> {
        train_cfg.validate()?;
        weights.validate()?;
        let state = ModelState::init(model_cfg, train_cfg.seed)?;
        let opt = OptimizerState::new(&state);
        let ts = teacher_seed(train_cfg.seed);
        Ok(Trainer {
            opt,
            rng: Rng::seed_from(train_cfg.seed ^ 0x5eed_0000_0000_0001 ^ stage as u64),
            step: 0,
            stage,
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
            pair_batches_taken: 0,
            cross_batches_taken: 0,
            state,
        })
    }

    /// One forward set, one backward, one clipped Adam update.
    ///
    /// A non-finite loss aborts with a diagnostic naming the step, the task
    /// set, and every component value.
    pub fn pretrain_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let mut tape = Tape::<f32>::new();
        let tm = self.state.register(&mut tape);
        let task_set = match batch {
            Batch::Pairs(_) => TaskSet::ImageText5,
            Batch::Quads(_) => TaskSet::Omni9,
        };
        let StepLoss { total, components } = match batch {
            Batch::Pairs(pairs) => image_text_step_loss(
                &mut tape,
                &tm,
                pairs,
                &self.feature_teacher,
                &self.cluster_teacher,
                &self.weights,
                self.state.temperature(),
                &mut self.rng,
            )?,
            Batch::Quads(quads) => omni_step_loss(&mut tape, &tm, quads, &self.weights)?,
        };
        let losses: Vec<(String, f64)> = components
            .iter()
            .map(|(n, id)| (n.clone(), tape.value(*id)))
            .collect();
        let weighted_total = self.weighted_total(task_set, &losses);
        if !tape.value(total).is_finite() || !weighted_total.is_finite() {
            return Err(Error::Train(format!(
                "non-finite loss at step {} ({}): components {:?}",
                self.step,
                task_set.name(),
                losses
            )));
        }
        tape.backward(total);
        let mut grads: Vec<Vec<f32>> = tm
            .ordered
            .iter()
            .zip(self.state.params())
            .map(|(&id, p)| {
                tape.grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.numel()])
            })
            .collect();
        clip_global_norm(&mut grads, GRAD_CLIP);
        let lr = self.train_cfg.learning_rate;
        adam_update(&mut self.state.params_mut(), &mut grads, &mut self.opt, lr);
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            task_set,
            losses,
            total: weighted_total,
            lr,
            k: self.state.k_split(),
        })
    }

    fn weighted_total(&self, task_set: TaskSet, losses: &[(String, f64)]) -> f64 {
        losses
            .iter()
            .map(|(n, v)| {
                let w = match task_set {
                    TaskSet::ImageText5 => match n.as_str() {
                        "mlm" => self.weights.mlm,
                        "mim_kl" => self.weights.mim_kl,
                        "mim_fr" => self.weights.mim_fr,
                        "itc" => self.weights.itc,
                        "itm" => self.weights.itm,
                        other => panic!("unknown image-text component {other}"),
                    },
                    TaskSet::Omni9 => self.weights.omni,
                };
                w * v
            })
            .sum()
    }
}

/// Result of a pre-training run.
#[derive(Debug)]
pub struct RunOutcome {
    pub state: ModelState<f32>,
    pub final_step: u64,
    pub metrics_path: std::path::PathBuf,
    pub checkpoint_path: std::path::PathBuf,
}

/// Drive a full pre-training stage over a corpus directory.
///
/// Stage 1 keeps K fixed and alternates the two task sets round-robin;
/// stage 2 requires a stage-1 checkpoint, runs image-text tasks only, and
/// resamples K uniformly from {0..=total_layers} before every forward.
/// `stop_after` truncates the run (used to exercise interrupt/resume).
pub fn run_pretraining(
    stage: u8,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    weights: TaskWeights,
    corpus_dir: &Path,
    resume: Option<&Path>,
    out_dir: &Path,
    stop_after: Option<u64>,
) -> Result<RunOutcome> {
    if stage != 1 && stage != 2 {
        return Err(Error::Config(format!("unknown stage {stage}")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // Resuming continues the same run: the stateful fields come from the
    // checkpoint, the requested config governs the run length, and the
    // fields that would silently fork the trajectory must agree.
    let adopt = |mut t: Trainer| -> Result<Trainer> {
        let c = t.train_cfg;
        if c.seed != train_cfg.seed
            || c.batch_size != train_cfg.batch_size
            || c.learning_rate != train_cfg.learning_rate
            || c.p_img_txt != train_cfg.p_img_txt
        {
            return Err(Error::Config(
                "resume settings (seed, batch, lr, task mix) disagree with the checkpoint".into(),
            ));
        }
        t.train_cfg = train_cfg;
        Ok(t)
    };
    let mut trainer = match (stage, resume) {
        (1, None) => Trainer::new(model_cfg, train_cfg, weights, 1)?,
        (1, Some(path)) => {
            let ckpt = load_checkpoint(path)?;
            let t = Trainer::from_checkpoint(&ckpt)?;
            if t.stage != 1 {
                return Err(Error::Config(
                    "resume checkpoint belongs to a different stage".into(),
                ));
            }
            adopt(t)?
        }
        (2, Some(path)) => {
            let ckpt = load_checkpoint(path)?;
            let prev = Trainer::from_checkpoint(&ckpt)?;
            if prev.stage == 2 {
                // resuming an interrupted stage-2 run
                adopt(prev)?
            } else {
                // fresh stage-2 run on top of stage-1 weights
                let mut t = Trainer::new(model_cfg, train_cfg, weights, 2)?;
                t.state = prev.state;
                t.state.split_layers(model_cfg.text_layers_k)?;
                t
            }
        }
        (2, None) => {
            return Err(Error::Config(
                "stage 2 requires a stage-1 checkpoint to resume from".into(),
            ));
        }
        _ => unreachable!(),
    };

    // when resuming, the checkpointed config governs the run
    let tc = trainer.train_cfg;
    let total_steps = match stage {
        1 => tc.total_steps,
        _ => tc.stage2_steps,
    };
    let until = stop_after.unwrap_or(total_steps).min(total_steps);

    let pairs = PairDataset::load(corpus_dir, crate::data::PAIRS_FILE)?;
    let crosses = CrossPairDataset::load(corpus_dir, crate::data::CROSSPAIRS_FILE)?;
    if pairs.len() < tc.batch_size || crosses.len() < tc.batch_size {
        return Err(Error::Data(format!(
            "corpus smaller than one batch ({} pairs, {} cross-pairs, batch {})",
            pairs.len(),
            crosses.len(),
            tc.batch_size
        )));
    }
    let mut pair_iter = pairs.batches(tc.batch_size, tc.seed ^ 0xa11ce);
    let mut cross_iter = crosses.batches(tc.batch_size, tc.seed ^ 0xb0b);
    for _ in 0..trainer.pair_batches_taken {
        pair_iter.next_batch();
    }
    for _ in 0..trainer.cross_batches_taken {
        cross_iter.next_batch();
    }

    let metrics_path = out_dir.join(format!("metrics_stage{stage}.jsonl"));
    let mut metrics_file = if trainer.step == 0 {
        std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?
    } else {
        std::fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?
    };

    while trainer.step < until {
        if stage == 2 {
            let k = trainer.rng.below(model_cfg.total_layers + 1);
            trainer.state.split_layers(k)?;
        }
        let task = if stage == 2 {
            TaskSet::ImageText5
        } else {
            round_robin_pick(&mut trainer.rng, tc.p_img_txt)
        };
        let batch = match task {
            TaskSet::ImageText5 => {
                let idxs = pair_iter.next_batch();
                trainer.pair_batches_taken += 1;
                Batch::Pairs(pairs.instances(&idxs))
            }
            TaskSet::Omni9 => {
                let idxs = cross_iter.next_batch();
                trainer.cross_batches_taken += 1;
                Batch::Quads(crosses.instances(&idxs))
            }
        };
        let metrics = trainer.pretrain_step(&batch)?;
        metrics_file
            .write_all(format!("{}\n", metrics.to_json_line()).as_bytes())
            .map_err(|e| Error::io(&metrics_path, e))?;
    }
    metrics_file
        .flush()
        .map_err(|e| Error::io(&metrics_path, e))?;

    let checkpoint_path = out_dir.join(format!("checkpoint_stage{stage}.ckpt"));
    save_checkpoint(&checkpoint_path, &trainer)?;
    Ok(RunOutcome {
        final_step: trainer.step,
        state: trainer.state,
        metrics_path,
        checkpoint_path,
    })
}

#[cfg(test)]
mod tests;
