//! The 14 training objectives: masked language modeling, two masked-image
//! objectives against frozen teachers, image-text contrastive alignment,
//! image-text matching with hard negatives, and the nine omni-directional
//! retrieval losses over (source, target) quadruples.
//!
//! Loss builders are generic over the float type so the exact same code path
//! is exercised by the f64 finite-difference gradient checks.

use crate::data::{ModalityFlags, PairInstance, QuadInstance};
use crate::error::{Error, Result};
use crate::masking::{self, MaskPlan};
use crate::model::{
    encode_image, encode_text, forward_pair, fuse, patches_leaf, taped_inv_temperature, TapedModel,
};
use crate::rng::Rng;
use crate::teachers::{ClusterTeacher, FeatureTeacher};
use crate::tensor::{Float, Tape, TensorId};

/// Per-task loss weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskWeights {
    pub mlm: f64,
    pub mim_kl: f64,
    pub mim_fr: f64,
    pub itc: f64,
    pub itm: f64,
    /// Weight applied to each of the nine omni terms.
    pub omni: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        TaskWeights {
            mlm: 0.5,
            mim_kl: 1.0,
            mim_fr: 1.0,
            itc: 1.0,
            itm: 1.0,
            omni: 1.0,
        }
    }
}

impl TaskWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.mlm,
            self.mim_kl,
            self.mim_fr,
            self.itc,
            self.itm,
            self.omni,
        ];
        if all.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("task weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// In-batch similarity matrix, read out of the tape for hard-negative
/// mining and inspection.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl SimilarityMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

fn read_matrix<F: Float>(tape: &Tape<F>, id: TensorId) -> SimilarityMatrix {
    let shape = tape.shape(id);
    SimilarityMatrix {
        values: tape.data(id).iter().map(|v| v.to_f64()).collect(),
        rows: shape[0],
        cols: shape[1],
    }
}

fn assert_unit_rows<F: Float>(tape: &Tape<F>, rows: &[TensorId], what: &str) {
    for &r in rows {
        let d = tape.data(r);
        let norm: f64 = d
            .iter()
            .map(|v| v.to_f64() * v.to_f64())
            .sum::<f64>()
            .sqrt();
        assert!(
            (norm - 1.0).abs() < 1e-4,
            "{what}: embedding row norm {norm} violates the unit-norm contract"
        );
    }
}

// ── masked language modeling ────────────────────────────────────────

/// One example's contribution to the MLM batch.
pub struct MlmItem<'a> {
    /// Fused sequence of the masked-text forward.
    pub fused_seq: TensorId,
    pub plan: &'a MaskPlan,
    /// Original (uncorrupted) tokens.
    pub targets: &'a [u16],
}

/// Mean cross-entropy over rows against the tied token-embedding head:
/// logits = rows * E^T.
pub fn masked_token_cross_entropy<F: Float>(
    tape: &mut Tape<F>,
    token_embedding: TensorId,
    rows: TensorId,
    targets: &[u16],
) -> TensorId {
    let m = tape.shape(rows)[0];
    assert_eq!(m, targets.len(), "one target per masked row");
    let vocab = tape.shape(token_embedding)[0];
    let et = tape.transpose(token_embedding);
    let logits = tape.matmul(rows, et);
    let logp = tape.log_softmax(logits, 1);
    let mut pick = vec![F::ZERO; m * vocab];
    for (r, &t) in targets.iter().enumerate() {
        pick[r * vocab + t as usize] = F::ONE;
    }
    let pick = tape.constant(pick, vec![m, vocab]);
    let hit = tape.mul(logp, pick);
    let total = tape.sum(hit);
    tape.scale(total, -1.0 / m as f64)
}

/// Cross-entropy at the masked text positions of the fused sequences, mean
/// over all masked positions in the batch. Empty plans contribute nothing;
/// an all-empty batch returns a constant zero.
pub fn mlm_loss<F: Float>(
    tape: &mut Tape<F>,
    token_embedding: TensorId,
    items: &[MlmItem<'_>],
) -> TensorId {
    let mut row_parts = Vec::new();
    let mut targets = Vec::new();
    for item in items {
        if item.plan.is_empty() {
            continue;
        }
        // fused layout: [CLS] at 0, token t at position t + 1
        let positions: Vec<usize> = item.plan.indices.iter().map(|&i| i + 1).collect();
        row_parts.push(tape.gather_rows(item.fused_seq, &positions));
        targets.extend(item.plan.indices.iter().map(|&i| item.targets[i]));
    }
    if row_parts.is_empty() {
        return tape.scalar(0.0);
    }
    let rows = tape.concat(&row_parts, 0);
    masked_token_cross_entropy(tape, token_embedding, rows, &targets)
}

// ── masked image modeling ───────────────────────────────────────────

/// Feature regression: mean squared error between the head output at the
/// fused image `[CLS]` and the frozen teacher feature of the intact image.
pub fn mim_fr_loss<F: Float>(
    tape: &mut Tape<F>,
    head_w: TensorId,
    head_b: TensorId,
    v_cls_rows: &[TensorId],
    teacher_features: &[Vec<f32>],
) -> TensorId {
    assert_eq!(v_cls_rows.len(), teacher_features.len());
    assert!(!v_cls_rows.is_empty());
    let feat_dim = tape.shape(head_w)[1];
    for t in teacher_features {
        assert_eq!(t.len(), feat_dim, "teacher feature width mismatch");
    }
    let rows = tape.concat(v_cls_rows, 0);
    let phi = tape.matmul(rows, head_w);
    let phi = tape.add_row_bias(phi, head_b);
    let target: Vec<F> = teacher_features
        .iter()
        .flat_map(|t| t.iter().map(|&v| F::from_f64(v as f64)))
        .collect();
    let target = tape.constant(target, vec![teacher_features.len(), feat_dim]);
    let diff = tape.sub(phi, target);
    let sq = tape.mul(diff, diff);
    tape.mean(sq)
}

/// Distillation: KL(teacher || softmax(head output)), mean over the batch.
pub fn mim_kl_loss<F: Float>(
    tape: &mut Tape<F>,
    head_w: TensorId,
    head_b: TensorId,
    v_cls_rows: &[TensorId],
    teacher_dists: &[Vec<f32>],
) -> TensorId {
    assert_eq!(v_cls_rows.len(), teacher_dists.len());
    assert!(!v_cls_rows.is_empty());
    let n = v_cls_rows.len();
    let clusters = tape.shape(head_w)[1];
    let rows = tape.concat(v_cls_rows, 0);
    let logits = tape.matmul(rows, head_w);
    let logits = tape.add_row_bias(logits, head_b);
    let log_psi = tape.log_softmax(logits, 1);
    let mut c = Vec::with_capacity(n * clusters);
    let mut c_ln_c = 0.0f64;
    for d in teacher_dists {
        assert_eq!(d.len(), clusters, "teacher distribution width mismatch");
        for &v in d {
            let v = v as f64;
            c.push(F::from_f64(v));
            if v > 0.0 {
                c_ln_c += v * v.ln();
            }
        }
    }
    let c = tape.constant(c, vec![n, clusters]);
    let cross = tape.mul(c, log_psi);
    let cross_sum = tape.sum(cross);
    // KL = sum c ln c - sum c ln psi, averaged over the batch
    let neg = tape.scale(cross_sum, -1.0 / n as f64);
    tape.add_const(neg, c_ln_c / n as f64)
}

// ── image-text contrastive ──────────────────────────────────────────

/// Bidirectional in-batch contrastive loss between unit-norm text rows f and
/// image rows g with temperature 1/`inv_tau`; sum over the batch of both
/// log-softmax directions, negated. Returns the raw similarity matrix for
/// hard-negative mining.
pub fn itc_loss<F: Float>(
    tape: &mut Tape<F>,
    inv_tau: TensorId,
    f_rows: &[TensorId],
    g_rows: &[TensorId],
) -> (TensorId, SimilarityMatrix) {
    assert!(!f_rows.is_empty(), "itc: empty batch");
    assert_eq!(f_rows.len(), g_rows.len(), "itc: side lengths differ");
    assert_unit_rows(tape, f_rows, "itc f");
    assert_unit_rows(tape, g_rows, "itc g");
    let n = f_rows.len();
    let f = tape.concat(f_rows, 0);
    let g = tape.concat(g_rows, 0);
    let gt = tape.transpose(g);
    let s = tape.matmul(f, gt);
    let sim = read_matrix(tape, s);
    let a = tape.scale_by(s, inv_tau);
    let lr = tape.log_softmax(a, 1);
    let lc = tape.log_softmax(a, 0);
    let both = tape.add(lr, lc);
    let mut eye = vec![F::ZERO; n * n];
    for i in 0..n {
        eye[i * n + i] = F::ONE;
    }
    let eye = tape.constant(eye, vec![n, n]);
    let diag = tape.mul(both, eye);
    let total = tape.sum(diag);
    (tape.scale(total, -1.0), sim)
}

/// Sample one hard negative image per text (rows) and one hard negative
/// text per image (columns), proportional to exp(s/tau), diagonal excluded.
pub fn itm_hard_negatives(
    sim: &SimilarityMatrix,
    tau: f64,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = sim.rows;
    assert_eq!(n, sim.cols, "itm mining needs a square matrix");
    if n < 2 {
        return Err(Error::Data(
            "hard-negative mining needs a batch of at least 2".into(),
        ));
    }
    assert!(tau > 0.0, "temperature must be positive");
    let mut neg_image_for_text = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| sim.at(i, j)).collect();
        neg_image_for_text.push(sample_off_diagonal(&row, i, tau, rng));
    }
    let mut neg_text_for_image = Vec::with_capacity(n);
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| sim.at(i, j)).collect();
        neg_text_for_image.push(sample_off_diagonal(&col, j, tau, rng));
    }
    Ok((neg_image_for_text, neg_text_for_image))
}

fn sample_off_diagonal(scores: &[f64], skip: usize, tau: f64, rng: &mut Rng) -> usize {
    let mx = scores
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != skip)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            if k == skip {
                0.0
            } else {
                ((v - mx) / tau).exp()
            }
        })
        .collect();
    rng.multinomial(&weights)
}

/// Binary cross entropy on matching scores; `rows` are fused text-`[CLS]`
/// outputs, labels are 1 for matched pairs and 0 for negatives. Computed
/// from logits for stability: softplus(z) - y z.
pub fn itm_loss<F: Float>(
    tape: &mut Tape<F>,
    itm_w: TensorId,
    itm_b: TensorId,
    rows: &[TensorId],
    labels: &[f64],
) -> TensorId {
    assert_eq!(rows.len(), labels.len());
    assert!(!rows.is_empty());
    let cat = tape.concat(rows, 0);
    let z = tape.matmul(cat, itm_w);
    let z = tape.add_row_bias(z, itm_b);
    let sp = tape.softplus(z);
    let y: Vec<F> = labels.iter().map(|&l| F::from_f64(l)).collect();
    let y = tape.constant(y, vec![labels.len(), 1]);
    let yz = tape.mul(z, y);
    let per = tape.sub(sp, yz);
    tape.mean(per)
}

// ── omni retrieval ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Image,
    Multi,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Image, Modality::Multi];

    pub fn short(&self) -> &'static str {
        match self {
            Modality::Text => "t",
            Modality::Image => "i",
            Modality::Multi => "m",
        }
    }

    fn present(&self, flags: &ModalityFlags) -> bool {
        match self {
            Modality::Text => flags.has_text,
            Modality::Image => flags.has_image,
            Modality::Multi => flags.multimodal(),
        }
    }
}

/// One side of a quadruple: the three unit-norm projections plus modality
/// presence flags.
pub struct OmniSide {
    pub f: TensorId,
    pub g: TensorId,
    pub h: TensorId,
    pub flags: ModalityFlags,
}

impl OmniSide {
    fn row(&self, m: Modality) -> TensorId {
        match m {
            Modality::Text => self.f,
            Modality::Image => self.g,
            Modality::Multi => self.h,
        }
    }
}

/// One of the nine directional contrastive terms.
pub struct OmniTerm {
    pub source: Modality,
    pub target: Modality,
    pub loss: TensorId,
    /// Similarities between present source rows and all target rows.
    pub sim: Option<SimilarityMatrix>,
}

impl OmniTerm {
    pub fn name(&self) -> String {
        format!("omni_{}{}", self.source.short(), self.target.short())
    }
}

/// The nine-way cross-pair contrastive loss. For each source modality u the
/// batch is restricted to examples whose u-side exists (the presence
/// indicator gates both the positives and the in-batch denominator over
/// sources, so placeholder encodings feed no term at all); each surviving
/// (u, v) term is the usual bidirectional log-softmax sum, negated. Targets
/// are full pairs and are not gated.
pub fn omni_loss<F: Float>(
    tape: &mut Tape<F>,
    inv_tau: TensorId,
    sources: &[OmniSide],
    targets: &[OmniSide],
    per_term_weight: f64,
) -> (TensorId, Vec<OmniTerm>) {
    assert_eq!(sources.len(), targets.len(), "omni: side lengths differ");
    let n = sources.len();
    let mut terms = Vec::with_capacity(9);
    let mut total = tape.scalar(0.0);
    for u in Modality::ALL {
        let present: Vec<usize> = (0..n).filter(|&i| u.present(&sources[i].flags)).collect();
        for v in Modality::ALL {
            if n == 0 || present.is_empty() {
                terms.push(OmniTerm {
                    source: u,
                    target: v,
                    loss: tape.scalar(0.0),
                    sim: None,
                });
                continue;
            }
            let src_rows: Vec<TensorId> = present.iter().map(|&i| sources[i].row(u)).collect();
            let tgt_rows: Vec<TensorId> = (0..n).map(|i| targets[i].row(v)).collect();
            assert_unit_rows(tape, &src_rows, "omni source");
            assert_unit_rows(tape, &tgt_rows, "omni target");
            let src = tape.concat(&src_rows, 0);
            let tgt = tape.concat(&tgt_rows, 0);
            let tgt_t = tape.transpose(tgt);
            let s = tape.matmul(src, tgt_t);
            let sim = read_matrix(tape, s);
            let a = tape.scale_by(s, inv_tau);
            let lr = tape.log_softmax(a, 1);
            let lc = tape.log_softmax(a, 0);
            let both = tape.add(lr, lc);
            let rows = present.len();
            let mut mask = vec![F::ZERO; rows * n];
            for (r, &i) in present.iter().enumerate() {
                mask[r * n + i] = F::ONE;
            }
            let mask = tape.constant(mask, vec![rows, n]);
            let picked = tape.mul(both, mask);
            let summed = tape.sum(picked);
            let loss = tape.scale(summed, -1.0);
            let weighted = tape.scale(loss, per_term_weight);
            total = tape.add(total, weighted);
            terms.push(OmniTerm {
                source: u,
                target: v,
                loss,
                sim: Some(sim),
            });
        }
    }
    (total, terms)
}

// ── per-step batch builders ─────────────────────────────────────────

/// Scalar total plus named components (component values are pre-weighting).
pub struct StepLoss {
    pub total: TensorId,
    pub components: Vec<(String, TensorId)>,
}

fn pixels_f<F: Float>(px: &[f32]) -> Vec<F> {
    px.iter().map(|&v| F::from_f64(v as f64)).collect()
}

/// Build the combined 5-task image-text loss on one tape: one masked-text
/// forward (MLM), one masked-image forward (both MIM losses), one intact
/// forward (ITC; ITM reuses it plus 2N hard-negative fusion passes).
pub fn image_text_step_loss<F: Float>(
    tape: &mut Tape<F>,
    tm: &TapedModel,
    batch: &[PairInstance],
    feature_teacher: &FeatureTeacher,
    cluster_teacher: &ClusterTeacher,
    weights: &TaskWeights,
    tau: f64,
    rng: &mut Rng,
) -> Result<StepLoss> {
    assert!(!batch.is_empty(), "empty image-text batch");
    let cfg = tm.config;

    // MLM: corrupt text, keep the image intact.
    let mut mlm_inputs = Vec::with_capacity(batch.len());
    for ex in batch {
        mlm_inputs.push(masking::mask_text(
            &ex.tokens,
            masking::TEXT_MASK_RATIO,
            rng,
        ));
    }
    let mut mlm_fused = Vec::with_capacity(batch.len());
    for (ex, (corrupted, _)) in batch.iter().zip(&mlm_inputs) {
        let text = encode_text(tape, tm, corrupted);
        let patches = patches_leaf(tape, &cfg, &pixels_f::<F>(&ex.pixels), false);
        let vis = encode_image(tape, tm, patches);
        mlm_fused.push(fuse(tape, tm, text, vis));
    }
    let mlm_items: Vec<MlmItem<'_>> = batch
        .iter()
        .zip(&mlm_inputs)
        .zip(&mlm_fused)
        .map(|((ex, (_, plan)), &fused)| MlmItem {
            fused_seq: fused,
            plan,
            targets: &ex.tokens,
        })
        .collect();
    let mlm = mlm_loss(tape, tm.token_embedding, &mlm_items);

    // MIM: corrupt the image, keep text intact; teachers see the intact
    // image.
    let mut v_cls_rows = Vec::with_capacity(batch.len());
    let mut teacher_feats = Vec::with_capacity(batch.len());
    let mut teacher_dists = Vec::with_capacity(batch.len());
    for ex in batch {
        let (masked_px, _plan) =
            masking::mask_image(&ex.pixels, &cfg, masking::IMAGE_MASK_RATIO, rng);
        let text = encode_text(tape, tm, &ex.tokens);
        let patches = patches_leaf(tape, &cfg, &pixels_f::<F>(&masked_px), false);
        let vis = encode_image(tape, tm, patches);
        let fused = fuse(tape, tm, text, vis);
        v_cls_rows.push(tape.gather_rows(fused, &[ex.tokens.len() + 1]));
        teacher_feats.push(feature_teacher.feature(&ex.pixels));
        teacher_dists.push(cluster_teacher.distribution(&ex.pixels));
    }
    let mim_fr = mim_fr_loss(tape, tm.mim_fr_w, tm.mim_fr_b, &v_cls_rows, &teacher_feats);
    let mim_kl = mim_kl_loss(tape, tm.mim_kl_w, tm.mim_kl_b, &v_cls_rows, &teacher_dists);

    // Intact forward shared by ITC and ITM.
    let outputs: Vec<_> = batch
        .iter()
        .map(|ex| {
            let patches = patches_leaf(tape, &cfg, &pixels_f::<F>(&ex.pixels), false);
            forward_pair(tape, tm, &ex.tokens, patches)
        })
        .collect();
    let f_rows: Vec<TensorId> = outputs.iter().map(|o| o.f_w).collect();
    let g_rows: Vec<TensorId> = outputs.iter().map(|o| o.g_v).collect();
    let inv_tau = taped_inv_temperature(tape, tm);
    let (itc, sim) = itc_loss(tape, inv_tau, &f_rows, &g_rows);

    // ITM: positives plus one hard-negative image and one hard-negative
    // text per example, mined from the ITC similarities.
    let mut itm_rows: Vec<TensorId> = outputs.iter().map(|o| o.w_cls_fused).collect();
    let mut labels = vec![1.0; batch.len()];
    if batch.len() >= 2 {
        let (neg_img, neg_txt) = itm_hard_negatives(&sim, tau, rng)?;
        for (i, &j) in neg_img.iter().enumerate() {
            let fused = fuse(tape, tm, outputs[i].textual_seq, outputs[j].visual_seq);
            itm_rows.push(tape.gather_rows(fused, &[0]));
            labels.push(0.0);
        }
        for (j, &i) in neg_txt.iter().enumerate() {
            let fused = fuse(tape, tm, outputs[i].textual_seq, outputs[j].visual_seq);
            itm_rows.push(tape.gather_rows(fused, &[0]));
            labels.push(0.0);
        }
    }
    let itm = itm_loss(tape, tm.itm_w, tm.itm_b, &itm_rows, &labels);

    let mut total = tape.scalar(0.0);
    for (id, w) in [
        (mlm, weights.mlm),
        (mim_kl, weights.mim_kl),
        (mim_fr, weights.mim_fr),
        (itc, weights.itc),
        (itm, weights.itm),
    ] {
        let scaled = tape.scale(id, w);
        total = tape.add(total, scaled);
    }
    Ok(StepLoss {
        total,
        components: vec![
            ("mlm".into(), mlm),
            ("mim_kl".into(), mim_kl),
            ("mim_fr".into(), mim_fr),
            ("itc".into(), itc),
            ("itm".into(), itm),
        ],
    })
}

/// Build the 9-task omni loss on one tape: both sides of every quadruple
/// run through the full model (placeholders included), then the gated
/// nine-way contrastive sum.
pub fn omni_step_loss<F: Float>(
    tape: &mut Tape<F>,
    tm: &TapedModel,
    batch: &[QuadInstance],
    weights: &TaskWeights,
) -> Result<StepLoss> {
    assert!(!batch.is_empty(), "empty omni batch");
    let cfg = tm.config;
    let mut sources = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for ex in batch {
        ex.source_flags.validate()?;
        let sp = patches_leaf(tape, &cfg, &pixels_f::<F>(&ex.source_pixels), false);
        let so = forward_pair(tape, tm, &ex.source_tokens, sp);
        sources.push(OmniSide {
            f: so.f_w,
            g: so.g_v,
            h: so.h_wv,
            flags: ex.source_flags,
        });
        let tp = patches_leaf(tape, &cfg, &pixels_f::<F>(&ex.target_pixels), false);
        let to = forward_pair(tape, tm, &ex.target_tokens, tp);
        targets.push(OmniSide {
            f: to.f_w,
            g: to.g_v,
            h: to.h_wv,
            flags: ModalityFlags {
                has_text: true,
                has_image: true,
            },
        });
    }
    let inv_tau = taped_inv_temperature(tape, tm);
    let (total, terms) = omni_loss(tape, inv_tau, &sources, &targets, weights.omni);
    Ok(StepLoss {
        total,
        components: terms.iter().map(|t| (t.name(), t.loss)).collect(),
    })
}
