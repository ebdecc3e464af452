//! Downstream fine-tuning and the seven-task evaluation suite.
//!
//! Two classification tasks (category over 10 classes, marketplace variant
//! over 6 disjoint classes) fine-tune a linear head on the fused text `[CLS]`;
//! retrieval tasks fine-tune contrastively: text<->image on f/g, text query
//! against multimodal target on f/h, image query against multimodal target
//! on g/h; the image-to-product-image metric reuses the image-query state
//! against target-image candidates only. All retrieval metrics are Recall@1
//! by dot product over unit-norm embeddings.

use std::path::Path;

use serde::Serialize;

use crate::data::{CrossPairDataset, PairDataset};
use crate::error::{Error, Result};
use crate::model::{
    embed_image_query, embed_text_query, forward_pair, patches_leaf, taped_inv_temperature,
    ModelState, Param,
};
use crate::objectives::itc_loss;
use crate::rng::Rng;
use crate::tensor::{Tape, TensorId};
use crate::train::{adam_update, clip_global_norm, OptimizerState, GRAD_CLIP};

/// Fine-tuning hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            learning_rate: 3e-4,
            epochs: 30,
            batch_size: 16,
            seed: 17,
        }
    }
}

/// Linear classifier on the fused text `[CLS]`.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub w: Param<f32>,
    pub b: Param<f32>,
    /// Sorted concept ids; position = class index.
    pub classes: Vec<u32>,
}

impl ClassifierHead {
    pub fn init(hidden_dim: usize, classes: Vec<u32>, seed: u64) -> Self {
        let mut rng = Rng::seed_from(seed ^ 0x4ead);
        let n = classes.len();
        ClassifierHead {
            w: Param {
                name: "head.w".into(),
                data: (0..hidden_dim * n).map(|_| rng.normal_f32(0.02)).collect(),
                shape: vec![hidden_dim, n],
            },
            b: Param {
                name: "head.b".into(),
                data: vec![0.0; n],
                shape: vec![n],
            },
            classes,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    fn class_index(&self, concept: u32) -> Result<usize> {
        self.classes
            .binary_search(&concept)
            .map_err(|_| Error::Data(format!("label {concept} outside the trained class set")))
    }
}

/// Distinct concept ids of a split, sorted (the label set).
pub fn class_set(ds: &PairDataset) -> Vec<u32> {
    let mut classes: Vec<u32> = ds.records.iter().map(|r| r.concept_id).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
}

/// Fine-tune head and backbone end-to-end with cross entropy; returns the
/// held-out accuracy together with the adapted states.
pub fn finetune_classifier(
    mut state: ModelState<f32>,
    train: &PairDataset,
    eval: &PairDataset,
    cfg: &FinetuneConfig,
) -> Result<(f64, ModelState<f32>, ClassifierHead)> {
    let classes = class_set(train);
    if classes.len() < 2 {
        return Err(Error::Data(
            "classification needs at least 2 classes".into(),
        ));
    }
    let mut head = ClassifierHead::init(state.config.hidden_dim, classes, cfg.seed);
    let mut opt = {
        let mut ps = state.params();
        ps.push(&head.w);
        ps.push(&head.b);
        OptimizerState::for_params(&ps)
    };
    let mut batches = train.batches(cfg.batch_size, cfg.seed ^ 0xba7c4);
    let steps = batches.per_epoch() * cfg.epochs;
    for _ in 0..steps {
        let idxs = batches.next_batch();
        let instances = train.instances(&idxs);
        let labels: Vec<usize> = instances
            .iter()
            .map(|ex| head.class_index(ex.concept_id))
            .collect::<Result<_>>()?;
        let mut tape = Tape::<f32>::new();
        let tm = state.register(&mut tape);
        let head_w = tape.leaf(head.w.data.clone(), head.w.shape.clone(), true);
        let head_b = tape.leaf(head.b.data.clone(), head.b.shape.clone(), true);
        let rows: Vec<TensorId> = instances
            .iter()
            .map(|ex| {
                let px: Vec<f32> = ex.pixels.clone();
                let patches = patches_leaf(&mut tape, &state.config, &px, false);
                forward_pair(&mut tape, &tm, &ex.tokens, patches).w_cls_fused
            })
            .collect();
        let cat = tape.concat(&rows, 0);
        let logits = tape.matmul(cat, head_w);
        let logits = tape.add_row_bias(logits, head_b);
        let logp = tape.log_softmax(logits, 1);
        let n_classes = head.n_classes();
        let mut pick = vec![0.0f32; labels.len() * n_classes];
        for (r, &l) in labels.iter().enumerate() {
            pick[r * n_classes + l] = 1.0;
        }
        let pick = tape.constant(pick, vec![labels.len(), n_classes]);
        let hit = tape.mul(logp, pick);
        let total = tape.sum(hit);
        let loss = tape.scale(total, -1.0 / labels.len() as f64);
        tape.backward(loss);
        let mut grads: Vec<Vec<f32>> = tm
            .ordered
            .iter()
            .chain([&head_w, &head_b])
            .zip(state.params().iter().chain([&&head.w, &&head.b]))
            .map(|(&id, p)| {
                tape.grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.numel()])
            })
            .collect();
        clip_global_norm(&mut grads, GRAD_CLIP);
        {
            let mut params = state.params_mut();
            params.push(&mut head.w);
            params.push(&mut head.b);
            adam_update(&mut params, &mut grads, &mut opt, cfg.learning_rate);
        }
    }
    let acc = classifier_accuracy(&state, &head, eval)?;
    Ok((acc, state, head))
}

/// Argmax accuracy over a labeled split; ties resolve to the lower class
/// index.
pub fn classifier_accuracy(
    state: &ModelState<f32>,
    head: &ClassifierHead,
    eval: &PairDataset,
) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::Data("empty evaluation split".into()));
    }
    let mut correct = 0usize;
    for chunk in (0..eval.len()).collect::<Vec<_>>().chunks(32) {
        let instances = eval.instances(chunk);
        let mut tape = Tape::<f32>::new();
        let tm = state.register(&mut tape);
        let head_w = tape.constant(head.w.data.clone(), head.w.shape.clone());
        let head_b = tape.constant(head.b.data.clone(), head.b.shape.clone());
        for ex in &instances {
            let label = head.class_index(ex.concept_id)?;
            let patches = patches_leaf(&mut tape, &state.config, &ex.pixels, false);
            let row = forward_pair(&mut tape, &tm, &ex.tokens, patches).w_cls_fused;
            let logits = tape.matmul(row, head_w);
            let logits = tape.add_row_bias(logits, head_b);
            let data = tape.data(logits);
            let mut best = 0usize;
            for (i, &v) in data.iter().enumerate() {
                if v > data[best] {
                    best = i;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / eval.len() as f64)
}

/// Retrieval fine-tuning tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrievalTask {
    /// Text <-> image alignment on pairs (serves both T2I and I2T).
    TextImage,
    /// Text query against multimodal target.
    QueryToProduct,
    /// Image query against multimodal target (also serves the
    /// image-to-product-image metric).
    ImageToProduct,
}

/// Contrastively fine-tune the task's query/candidate alignment. Queries
/// never run the fusion stack (text queries use the text encoder only;
/// image queries use the patch embedder only).
pub fn finetune_retrieval_pairs(
    mut state: ModelState<f32>,
    train: &PairDataset,
    cfg: &FinetuneConfig,
) -> Result<ModelState<f32>> {
    let mut batches = train.batches(cfg.batch_size, cfg.seed ^ 0x7e7c4);
    let steps = batches.per_epoch() * cfg.epochs;
    let mut opt = OptimizerState::new(&state);
    for _ in 0..steps {
        let idxs = batches.next_batch();
        let instances = train.instances(&idxs);
        let mut tape = Tape::<f32>::new();
        let tm = state.register(&mut tape);
        let mut f_rows = Vec::with_capacity(instances.len());
        let mut g_rows = Vec::with_capacity(instances.len());
        for ex in &instances {
            let f = embed_text_query(&mut tape, &tm, &ex.tokens);
            let patches = patches_leaf(&mut tape, &state.config, &ex.pixels, false);
            let g = embed_image_query(&mut tape, &tm, patches);
            f_rows.push(f);
            g_rows.push(g);
        }
        let inv_tau = taped_inv_temperature(&mut tape, &tm);
        let (loss, _) = itc_loss(&mut tape, inv_tau, &f_rows, &g_rows);
        step_model_update(
            &mut state,
            &mut opt,
            tape,
            &tm.ordered,
            loss,
            cfg.learning_rate,
        );
    }
    Ok(state)
}

/// Fine-tune a cross-pair task: unimodal query embedding against the h
/// embedding of the full target pair.
pub fn finetune_retrieval_crosspairs(
    mut state: ModelState<f32>,
    task: RetrievalTask,
    train: &CrossPairDataset,
    cfg: &FinetuneConfig,
) -> Result<ModelState<f32>> {
    let mut batches = train.batches(cfg.batch_size, cfg.seed ^ 0xc4055);
    let steps = batches.per_epoch() * cfg.epochs;
    let mut opt = OptimizerState::new(&state);
    for _ in 0..steps {
        let idxs = batches.next_batch();
        let instances = train.instances(&idxs);
        let mut tape = Tape::<f32>::new();
        let tm = state.register(&mut tape);
        let mut q_rows = Vec::with_capacity(instances.len());
        let mut t_rows = Vec::with_capacity(instances.len());
        for ex in &instances {
            let q = match task {
                RetrievalTask::QueryToProduct => {
                    if !ex.source_flags.has_text {
                        return Err(Error::Data(format!(
                            "record {}: text query expected",
                            ex.record_id
                        )));
                    }
                    embed_text_query(&mut tape, &tm, &ex.source_tokens)
                }
                RetrievalTask::ImageToProduct => {
                    if !ex.source_flags.has_image {
                        return Err(Error::Data(format!(
                            "record {}: image query expected",
                            ex.record_id
                        )));
                    }
                    let patches = patches_leaf(&mut tape, &state.config, &ex.source_pixels, false);
                    embed_image_query(&mut tape, &tm, patches)
                }
                RetrievalTask::TextImage => {
                    return Err(Error::Config(
                        "text-image fine-tuning runs on the pairs split".into(),
                    ))
                }
            };
            let patches = patches_leaf(&mut tape, &state.config, &ex.target_pixels, false);
            let h = forward_pair(&mut tape, &tm, &ex.target_tokens, patches).h_wv;
            q_rows.push(q);
            t_rows.push(h);
        }
        let inv_tau = taped_inv_temperature(&mut tape, &tm);
        let (loss, _) = itc_loss(&mut tape, inv_tau, &q_rows, &t_rows);
        step_model_update(
            &mut state,
            &mut opt,
            tape,
            &tm.ordered,
            loss,
            cfg.learning_rate,
        );
    }
    Ok(state)
}

fn step_model_update(
    state: &mut ModelState<f32>,
    opt: &mut OptimizerState,
    mut tape: Tape<f32>,
    ordered: &[TensorId],
    loss: TensorId,
    lr: f64,
) {
    tape.backward(loss);
    let mut grads: Vec<Vec<f32>> = ordered
        .iter()
        .zip(state.params())
        .map(|(&id, p)| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    clip_global_norm(&mut grads, GRAD_CLIP);
    adam_update(&mut state.params_mut(), &mut grads, opt, lr);
}

// ── embedding extraction ────────────────────────────────────────────

fn read_row(tape: &Tape<f32>, id: TensorId) -> Vec<f32> {
    tape.data(id).to_vec()
}

/// f(w), g(v), h(w, v) for every record of a pairs split.
pub fn embed_pairs(
    state: &ModelState<f32>,
    ds: &PairDataset,
) -> (Vec<Vec<f32>>, Vec<Vec<f32>>, Vec<Vec<f32>>) {
    let mut fs = Vec::with_capacity(ds.len());
    let mut gs = Vec::with_capacity(ds.len());
    let mut hs = Vec::with_capacity(ds.len());
    for chunk in (0..ds.len()).collect::<Vec<_>>().chunks(32) {
        let instances = ds.instances(chunk);
        let mut tape = Tape::<f32>::new();
        let tm = state.register(&mut tape);
        for ex in &instances {
            let patches = patches_leaf(&mut tape, &state.config, &ex.pixels, false);
            let out = forward_pair(&mut tape, &tm, &ex.tokens, patches);
            fs.push(read_row(&tape, out.f_w));
            gs.push(read_row(&tape, out.g_v));
            hs.push(read_row(&tape, out.h_wv));
        }
    }
    (fs, gs, hs)
}

/// Query embeddings and (h(target), g(target image)) candidates for a
/// cross-pair split.
pub fn embed_crosspairs(
    state: &ModelState<f32>,
    ds: &CrossPairDataset,
    task: RetrievalTask,
) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    let mut queries = Vec::with_capacity(ds.len());
    let mut target_h = Vec::with_capacity(ds.len());
    let mut target_g = Vec::with_capacity(ds.len());
    for chunk in (0..ds.len()).collect::<Vec<_>>().chunks(32) {
        let instances = ds.instances(chunk);
        let mut tape = Tape::<f32>::new();
        let tm = state.register(&mut tape);
        for ex in &instances {
            let q = match task {
                RetrievalTask::QueryToProduct => {
                    if !ex.source_flags.has_text {
                        return Err(Error::Data(format!(
                            "record {}: text query expected",
                            ex.record_id
                        )));
                    }
                    embed_text_query(&mut tape, &tm, &ex.source_tokens)
                }
                RetrievalTask::ImageToProduct => {
                    if !ex.source_flags.has_image {
                        return Err(Error::Data(format!(
                            "record {}: image query expected",
                            ex.record_id
                        )));
                    }
                    let patches = patches_leaf(&mut tape, &state.config, &ex.source_pixels, false);
                    embed_image_query(&mut tape, &tm, patches)
                }
                RetrievalTask::TextImage => {
                    return Err(Error::Config("pairs task on cross-pair data".into()))
                }
            };
            queries.push(read_row(&tape, q));
            let patches = patches_leaf(&mut tape, &state.config, &ex.target_pixels, false);
            let out = forward_pair(&mut tape, &tm, &ex.target_tokens, patches);
            target_h.push(read_row(&tape, out.h_wv));
            target_g.push(read_row(&tape, out.g_v));
        }
    }
    Ok((queries, target_h, target_g))
}

// ── recall ──────────────────────────────────────────────────────────

/// Fraction of queries whose true candidate ranks in the top k by dot
/// product; ties break toward the lower candidate index.
///
/// Panics if `k` is 0 or exceeds the candidate count, or if `ground_truth`
/// holds an invalid index (contract errors).
pub fn recall_at_k(
    queries: &[Vec<f32>],
    candidates: &[Vec<f32>],
    ground_truth: &[usize],
    k: usize,
) -> f64 {
    assert!(!queries.is_empty(), "recall: no queries");
    assert_eq!(queries.len(), ground_truth.len());
    assert!(
        k >= 1 && k <= candidates.len(),
        "recall: k={k} out of range 1..={}",
        candidates.len()
    );
    let mut hits = 0usize;
    for (q, &truth) in queries.iter().zip(ground_truth) {
        assert!(
            truth < candidates.len(),
            "recall: ground truth out of range"
        );
        let scores: Vec<f64> = candidates.iter().map(|c| dot(q, c)).collect();
        let true_score = scores[truth];
        // rank = number of candidates strictly better, counting equal-score
        // candidates with lower index as better
        let rank = scores
            .iter()
            .enumerate()
            .filter(|&(i, &s)| s > true_score || (s == true_score && i < truth))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    hits as f64 / queries.len() as f64
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "embedding width mismatch");
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

// ── the seven-task suite ────────────────────────────────────────────

/// Per-task metrics plus their arithmetic mean.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvalReport {
    pub cc: f64,
    pub mpc: f64,
    pub t2i: f64,
    pub i2t: f64,
    pub q2p: f64,
    pub i2p: f64,
    pub i2pi: f64,
    pub meta_avg: f64,
    pub seed: u64,
    pub checkpoint: String,
}

impl EvalReport {
    pub fn compute(metrics: [f64; 7], seed: u64, checkpoint: impl Into<String>) -> EvalReport {
        let [cc, mpc, t2i, i2t, q2p, i2p, i2pi] = metrics;
        let meta_avg = metrics.iter().sum::<f64>() / 7.0;
        EvalReport {
            cc,
            mpc,
            t2i,
            i2t,
            q2p,
            i2p,
            i2pi,
            meta_avg,
            seed,
            checkpoint: checkpoint.into(),
        }
    }

    pub fn metrics(&self) -> [f64; 7] {
        [
            self.cc, self.mpc, self.t2i, self.i2t, self.q2p, self.i2p, self.i2pi,
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// The five fine-tuned states the suite consumes (the seven metrics reuse
/// the text-image state for both directions and the image-product state for
/// both image metrics).
pub struct SuiteStates {
    pub cc: (ModelState<f32>, ClassifierHead),
    pub mpc: (ModelState<f32>, ClassifierHead),
    pub t2i: ModelState<f32>,
    pub q2p: ModelState<f32>,
    pub i2p: ModelState<f32>,
}

/// Run all seven evaluations on the held-out splits of a corpus directory.
pub fn evaluate_suite(
    states: &SuiteStates,
    corpus_dir: &Path,
    seed: u64,
    checkpoint_label: &str,
) -> Result<EvalReport> {
    let cc_eval = PairDataset::load(corpus_dir, crate::data::CC_EVAL)?;
    let mpc_eval = PairDataset::load(corpus_dir, crate::data::MPC_EVAL)?;
    let t2i_eval = PairDataset::load(corpus_dir, crate::data::T2I_EVAL)?;
    let q2p_eval = CrossPairDataset::load(corpus_dir, crate::data::Q2P_EVAL)?;
    let i2p_eval = CrossPairDataset::load(corpus_dir, crate::data::I2P_EVAL)?;

    let cc = classifier_accuracy(&states.cc.0, &states.cc.1, &cc_eval)?;
    let mpc = classifier_accuracy(&states.mpc.0, &states.mpc.1, &mpc_eval)?;

    let (fs, gs, _) = embed_pairs(&states.t2i, &t2i_eval);
    let gt: Vec<usize> = (0..t2i_eval.len()).collect();
    let t2i = recall_at_k(&fs, &gs, &gt, 1);
    let i2t = recall_at_k(&gs, &fs, &gt, 1);

    let (q_q2p, h_q2p, _) =
        embed_crosspairs(&states.q2p, &q2p_eval, RetrievalTask::QueryToProduct)?;
    let gt_q: Vec<usize> = (0..q2p_eval.len()).collect();
    let q2p = recall_at_k(&q_q2p, &h_q2p, &gt_q, 1);

    // i2p and i2p-image share the same query set by construction
    let (q_i2p, h_i2p, g_i2p) =
        embed_crosspairs(&states.i2p, &i2p_eval, RetrievalTask::ImageToProduct)?;
    let gt_i: Vec<usize> = (0..i2p_eval.len()).collect();
    let i2p = recall_at_k(&q_i2p, &h_i2p, &gt_i, 1);
    let i2pi = recall_at_k(&q_i2p, &g_i2p, &gt_i, 1);

    Ok(EvalReport::compute(
        [cc, mpc, t2i, i2t, q2p, i2p, i2pi],
        seed,
        checkpoint_label,
    ))
}

/// Persist a fine-tuned state (and classifier head, when present) as a
/// checkpoint with a `finetune.task` tag.
pub fn save_finetuned(
    path: &Path,
    state: &ModelState<f32>,
    head: Option<&ClassifierHead>,
    task: &str,
) -> Result<()> {
    let mut config = crate::train::model_config_snapshot(&state.config, state.k_split());
    config.insert("finetune.task".into(), task.to_string());
    if let Some(h) = head {
        let classes: Vec<String> = h.classes.iter().map(|c| c.to_string()).collect();
        config.insert("finetune.classes".into(), classes.join(","));
    }
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = state
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.shape.clone(), p.data.clone()))
        .collect();
    if let Some(h) = head {
        tensors.push((h.w.name.clone(), h.w.shape.clone(), h.w.data.clone()));
        tensors.push((h.b.name.clone(), h.b.shape.clone(), h.b.data.clone()));
    }
    let ckpt = crate::train::Checkpoint { config, tensors };
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Load a state saved by [`save_finetuned`]; returns the task tag.
pub fn load_finetuned(path: &Path) -> Result<(ModelState<f32>, Option<ClassifierHead>, String)> {
    let ckpt = crate::train::load_checkpoint(path)?;
    let state = crate::train::model_from_checkpoint(&ckpt)?;
    let task = ckpt.get("finetune.task")?.to_string();
    let head = match ckpt.config.get("finetune.classes") {
        Some(classes_text) => {
            let classes: Vec<u32> = classes_text
                .split(',')
                .map(|c| {
                    c.parse::<u32>()
                        .map_err(|_| Error::Format(format!("bad class id {c:?}")))
                })
                .collect::<Result<_>>()?;
            let find = |name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
                ckpt.tensors
                    .iter()
                    .find(|(n, _, _)| n == name)
                    .map(|(_, s, d)| (s.clone(), d.clone()))
                    .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name}")))
            };
            let (w_shape, w_data) = find("head.w")?;
            let (b_shape, b_data) = find("head.b")?;
            if w_shape != [state.config.hidden_dim, classes.len()] || b_shape != [classes.len()] {
                return Err(Error::Format("classifier head shape mismatch".into()));
            }
            Some(ClassifierHead {
                w: Param {
                    name: "head.w".into(),
                    data: w_data,
                    shape: w_shape,
                },
                b: Param {
                    name: "head.b".into(),
                    data: b_data,
                    shape: b_shape,
                },
                classes,
            })
        }
        None => None,
    };
    Ok((state, head, task))
}

/// Write per-record embeddings of a pairs split: concept label then the
/// f, g, h projections, tab-separated, one row per record.
pub fn export_embeddings(state: &ModelState<f32>, ds: &PairDataset, out_path: &Path) -> Result<()> {
    let (fs, gs, hs) = embed_pairs(state, ds);
    let mut text = String::new();
    for (((rec, f), g), h) in ds.records.iter().zip(&fs).zip(&gs).zip(&hs) {
        text.push_str(&rec.concept_id.to_string());
        for v in f.iter().chain(g).chain(h) {
            text.push('\t');
            text.push_str(&format!("{v:.7}"));
        }
        text.push('\n');
    }
    std::fs::write(out_path, text).map_err(|e| Error::io(out_path, e))
}

#[cfg(test)]
mod tests;
