//! The tri-encoder model: text transformer (first K blocks), linear patch
//! embedder for images, multimodal fusion transformer (remaining M blocks),
//! plus the projection heads f/g/h and the task heads.
//!
//! All K+M transformer blocks live in one role-agnostic pool; `split_layers`
//! moves the text/fusion boundary without touching any weights, which is what
//! 2nd-stage modality randomization exploits.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Float, Tape, TensorId};

/// Lower clamp for the learned temperature.
pub const TAU_MIN: f64 = 1e-3;
/// Upper clamp for the learned temperature.
pub const TAU_MAX: f64 = 1.0;
/// Initial temperature.
pub const TAU_INIT: f64 = 0.07;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub total_layers: usize,
    pub text_layers_k: usize,
    pub image_patch_size: usize,
    pub image_side: usize,
    pub proj_dim: usize,
    pub max_text_len: usize,
    /// Output width of the masked-image feature-regression head.
    pub mim_feat_dim: usize,
    /// Output width of the masked-image cluster head.
    pub mim_clusters: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            hidden_dim: 64,
            num_heads: 4,
            total_layers: 4,
            text_layers_k: 2,
            image_patch_size: 8,
            image_side: 32,
            proj_dim: 32,
            max_text_len: 32,
            mim_feat_dim: 32,
            mim_clusters: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.text_layers_k > self.total_layers {
            return Err(Error::Config(format!(
                "text_layers_k {} exceeds total_layers {}",
                self.text_layers_k, self.total_layers
            )));
        }
        if self.hidden_dim == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.image_patch_size == 0 || self.image_side % self.image_patch_size != 0 {
            return Err(Error::Config(format!(
                "image_side {} not divisible by patch size {}",
                self.image_side, self.image_patch_size
            )));
        }
        if self.vocab_size == 0 || self.proj_dim == 0 || self.max_text_len == 0 {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        Ok(())
    }

    /// Patches per image (P).
    pub fn num_patches(&self) -> usize {
        let per_side = self.image_side / self.image_patch_size;
        per_side * per_side
    }

    /// Pixels per patch.
    pub fn patch_dim(&self) -> usize {
        self.image_patch_size * self.image_patch_size
    }

    pub fn pixel_count(&self) -> usize {
        self.image_side * self.image_side
    }

    fn mlp_dim(&self) -> usize {
        4 * self.hidden_dim
    }

    pub fn fusion_layers_m(&self) -> usize {
        self.total_layers - self.text_layers_k
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param<F: Float> {
    pub name: String,
    pub data: Vec<F>,
    pub shape: Vec<usize>,
}

impl<F: Float> Param<F> {
    fn gauss(name: &str, shape: Vec<usize>, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::from_f64(rng.normal_f64() * INIT_STD))
            .collect();
        Param {
            name: name.to_string(),
            data,
            shape,
        }
    }

    fn filled(name: &str, shape: Vec<usize>, v: f64) -> Self {
        let n: usize = shape.iter().product();
        Param {
            name: name.to_string(),
            data: vec![F::from_f64(v); n],
            shape,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// One transformer block: multi-head self-attention + MLP, post-norm.
#[derive(Debug, Clone)]
pub struct Block<F: Float> {
    pub wq: Param<F>,
    pub bq: Param<F>,
    pub wk: Param<F>,
    pub bk: Param<F>,
    pub wv: Param<F>,
    pub bv: Param<F>,
    pub wo: Param<F>,
    pub bo: Param<F>,
    pub ln1_g: Param<F>,
    pub ln1_b: Param<F>,
    pub w_up: Param<F>,
    pub b_up: Param<F>,
    pub w_down: Param<F>,
    pub b_down: Param<F>,
    pub ln2_g: Param<F>,
    pub ln2_b: Param<F>,
}

impl<F: Float> Block<F> {
    fn init(idx: usize, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let h = cfg.hidden_dim;
        let m = cfg.mlp_dim();
        let p = |s: &str| format!("block{idx}.{s}");
        Block {
            wq: Param::gauss(&p("wq"), vec![h, h], rng),
            bq: Param::filled(&p("bq"), vec![h], 0.0),
            wk: Param::gauss(&p("wk"), vec![h, h], rng),
            bk: Param::filled(&p("bk"), vec![h], 0.0),
            wv: Param::gauss(&p("wv"), vec![h, h], rng),
            bv: Param::filled(&p("bv"), vec![h], 0.0),
            wo: Param::gauss(&p("wo"), vec![h, h], rng),
            bo: Param::filled(&p("bo"), vec![h], 0.0),
            ln1_g: Param::filled(&p("ln1_g"), vec![h], 1.0),
            ln1_b: Param::filled(&p("ln1_b"), vec![h], 0.0),
            w_up: Param::gauss(&p("w_up"), vec![h, m], rng),
            b_up: Param::filled(&p("b_up"), vec![m], 0.0),
            w_down: Param::gauss(&p("w_down"), vec![m, h], rng),
            b_down: Param::filled(&p("b_down"), vec![h], 0.0),
            ln2_g: Param::filled(&p("ln2_g"), vec![h], 1.0),
            ln2_b: Param::filled(&p("ln2_b"), vec![h], 0.0),
        }
    }

    fn visit<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        out.extend([
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln1_g,
            &self.ln1_b,
            &self.w_up,
            &self.b_up,
            &self.w_down,
            &self.b_down,
            &self.ln2_g,
            &self.ln2_b,
        ]);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        out.extend([
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w_up,
            &mut self.b_up,
            &mut self.w_down,
            &mut self.b_down,
            &mut self.ln2_g,
            &mut self.ln2_b,
        ]);
    }
}

/// Every learnable parameter plus the current text/fusion boundary K.
#[derive(Debug, Clone)]
pub struct ModelState<F: Float> {
    pub config: ModelConfig,
    pub token_embedding: Param<F>,
    pub patch_w: Param<F>,
    pub patch_b: Param<F>,
    pub text_cls: Param<F>,
    pub image_cls: Param<F>,
    pub pos_text: Param<F>,
    pub pos_image: Param<F>,
    pub blocks: Vec<Block<F>>,
    pub proj_f: Param<F>,
    pub proj_g: Param<F>,
    pub proj_h: Param<F>,
    pub itm_w: Param<F>,
    pub itm_b: Param<F>,
    pub mim_fr_w: Param<F>,
    pub mim_fr_b: Param<F>,
    pub mim_kl_w: Param<F>,
    pub mim_kl_b: Param<F>,
    pub log_temperature: Param<F>,
    k_split: usize,
}

impl<F: Float> ModelState<F> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from(seed);
        let h = config.hidden_dim;
        let blocks = (0..config.total_layers)
            .map(|i| Block::init(i, &config, &mut rng))
            .collect();
        Ok(ModelState {
            config,
            token_embedding: Param::gauss("token_embedding", vec![config.vocab_size, h], &mut rng),
            patch_w: Param::gauss("patch.w", vec![config.patch_dim(), h], &mut rng),
            patch_b: Param::filled("patch.b", vec![h], 0.0),
            text_cls: Param::gauss("text_cls", vec![1, h], &mut rng),
            image_cls: Param::gauss("image_cls", vec![1, h], &mut rng),
            pos_text: Param::gauss("pos_text", vec![config.max_text_len + 1, h], &mut rng),
            pos_image: Param::gauss("pos_image", vec![config.num_patches() + 1, h], &mut rng),
            blocks,
            proj_f: Param::gauss("proj_f", vec![h, config.proj_dim], &mut rng),
            proj_g: Param::gauss("proj_g", vec![h, config.proj_dim], &mut rng),
            proj_h: Param::gauss("proj_h", vec![h, config.proj_dim], &mut rng),
            itm_w: Param::gauss("itm.w", vec![h, 1], &mut rng),
            itm_b: Param::filled("itm.b", vec![1], 0.0),
            mim_fr_w: Param::gauss("mim_fr.w", vec![h, config.mim_feat_dim], &mut rng),
            mim_fr_b: Param::filled("mim_fr.b", vec![config.mim_feat_dim], 0.0),
            mim_kl_w: Param::gauss("mim_kl.w", vec![h, config.mim_clusters], &mut rng),
            mim_kl_b: Param::filled("mim_kl.b", vec![config.mim_clusters], 0.0),
            log_temperature: Param::filled("log_temperature", vec![1], TAU_INIT.ln()),
            k_split: config.text_layers_k,
        })
    }

    /// Reassign blocks `[0, k)` to the text encoder and `[k, total)` to
    /// fusion. Parameter values are untouched.
    pub fn split_layers(&mut self, k: usize) -> Result<()> {
        if k > self.config.total_layers {
            return Err(Error::Config(format!(
                "split_layers: K={k} out of range 0..={}",
                self.config.total_layers
            )));
        }
        self.k_split = k;
        Ok(())
    }

    pub fn k_split(&self) -> usize {
        self.k_split
    }

    /// Current temperature value (clamped).
    pub fn temperature(&self) -> f64 {
        self.log_temperature.data[0]
            .to_f64()
            .clamp(TAU_MIN.ln(), TAU_MAX.ln())
            .exp()
    }

    /// Parameters in the fixed serialization order.
    pub fn params(&self) -> Vec<&Param<F>> {
        let mut out = vec![
            &self.token_embedding,
            &self.patch_w,
            &self.patch_b,
            &self.text_cls,
            &self.image_cls,
            &self.pos_text,
            &self.pos_image,
        ];
        for b in &self.blocks {
            b.visit(&mut out);
        }
        out.extend([
            &self.proj_f,
            &self.proj_g,
            &self.proj_h,
            &self.itm_w,
            &self.itm_b,
            &self.mim_fr_w,
            &self.mim_fr_b,
            &self.mim_kl_w,
            &self.mim_kl_b,
            &self.log_temperature,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = vec![
            &mut self.token_embedding,
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.text_cls,
            &mut self.image_cls,
            &mut self.pos_text,
            &mut self.pos_image,
        ];
        for b in &mut self.blocks {
            b.visit_mut(&mut out);
        }
        out.extend([
            &mut self.proj_f,
            &mut self.proj_g,
            &mut self.proj_h,
            &mut self.itm_w,
            &mut self.itm_b,
            &mut self.mim_fr_w,
            &mut self.mim_fr_b,
            &mut self.mim_kl_w,
            &mut self.mim_kl_b,
            &mut self.log_temperature,
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Record every parameter on a tape as a gradient-tracked leaf.
    pub fn register(&self, tape: &mut Tape<F>) -> TapedModel {
        let mut reg = |p: &Param<F>| tape.leaf(p.data.clone(), p.shape.clone(), true);
        let token_embedding = reg(&self.token_embedding);
        let patch_w = reg(&self.patch_w);
        let patch_b = reg(&self.patch_b);
        let text_cls = reg(&self.text_cls);
        let image_cls = reg(&self.image_cls);
        let pos_text = reg(&self.pos_text);
        let pos_image = reg(&self.pos_image);
        let blocks: Vec<TapedBlock> = self
            .blocks
            .iter()
            .map(|b| TapedBlock {
                wq: reg(&b.wq),
                bq: reg(&b.bq),
                wk: reg(&b.wk),
                bk: reg(&b.bk),
                wv: reg(&b.wv),
                bv: reg(&b.bv),
                wo: reg(&b.wo),
                bo: reg(&b.bo),
                ln1_g: reg(&b.ln1_g),
                ln1_b: reg(&b.ln1_b),
                w_up: reg(&b.w_up),
                b_up: reg(&b.b_up),
                w_down: reg(&b.w_down),
                b_down: reg(&b.b_down),
                ln2_g: reg(&b.ln2_g),
                ln2_b: reg(&b.ln2_b),
            })
            .collect();
        let proj_f = reg(&self.proj_f);
        let proj_g = reg(&self.proj_g);
        let proj_h = reg(&self.proj_h);
        let itm_w = reg(&self.itm_w);
        let itm_b = reg(&self.itm_b);
        let mim_fr_w = reg(&self.mim_fr_w);
        let mim_fr_b = reg(&self.mim_fr_b);
        let mim_kl_w = reg(&self.mim_kl_w);
        let mim_kl_b = reg(&self.mim_kl_b);
        let log_temperature = reg(&self.log_temperature);

        let mut ordered = vec![
            token_embedding,
            patch_w,
            patch_b,
            text_cls,
            image_cls,
            pos_text,
            pos_image,
        ];
        for b in &blocks {
            ordered.extend([
                b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln1_g, b.ln1_b, b.w_up, b.b_up,
                b.w_down, b.b_down, b.ln2_g, b.ln2_b,
            ]);
        }
        ordered.extend([
            proj_f,
            proj_g,
            proj_h,
            itm_w,
            itm_b,
            mim_fr_w,
            mim_fr_b,
            mim_kl_w,
            mim_kl_b,
            log_temperature,
        ]);

        TapedModel {
            config: self.config,
            k_split: self.k_split,
            token_embedding,
            patch_w,
            patch_b,
            text_cls,
            image_cls,
            pos_text,
            pos_image,
            blocks,
            proj_f,
            proj_g,
            proj_h,
            itm_w,
            itm_b,
            mim_fr_w,
            mim_fr_b,
            mim_kl_w,
            mim_kl_b,
            log_temperature,
            ordered,
        }
    }
}

impl ModelState<f32> {
    /// Widened copy for f64 gradient checking.
    pub fn to_f64(&self) -> ModelState<f64> {
        let mut out = ModelState::<f64>::init(self.config, 0).expect("valid config");
        out.k_split = self.k_split;
        let src = self.params();
        for (dst, s) in out.params_mut().into_iter().zip(src) {
            dst.data = s.data.iter().map(|&v| v as f64).collect();
        }
        out
    }
}

/// Tape handles for every registered parameter.
pub struct TapedBlock {
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
    pub ln1_g: TensorId,
    pub ln1_b: TensorId,
    pub w_up: TensorId,
    pub b_up: TensorId,
    pub w_down: TensorId,
    pub b_down: TensorId,
    pub ln2_g: TensorId,
    pub ln2_b: TensorId,
}

pub struct TapedModel {
    pub config: ModelConfig,
    pub k_split: usize,
    pub token_embedding: TensorId,
    pub patch_w: TensorId,
    pub patch_b: TensorId,
    pub text_cls: TensorId,
    pub image_cls: TensorId,
    pub pos_text: TensorId,
    pub pos_image: TensorId,
    pub blocks: Vec<TapedBlock>,
    pub proj_f: TensorId,
    pub proj_g: TensorId,
    pub proj_h: TensorId,
    pub itm_w: TensorId,
    pub itm_b: TensorId,
    pub mim_fr_w: TensorId,
    pub mim_fr_b: TensorId,
    pub mim_kl_w: TensorId,
    pub mim_kl_b: TensorId,
    pub log_temperature: TensorId,
    /// Same order as [`ModelState::params`].
    pub ordered: Vec<TensorId>,
}

impl TapedModel {
    /// Number of parameter tensors for a config.
    pub fn param_tensor_count(config: &ModelConfig) -> usize {
        7 + 16 * config.total_layers + 10
    }

    /// Rebuild the handle structure from leaves recorded in
    /// [`ModelState::params`] order. Used by gradient checking, where the
    /// checker owns the leaves.
    pub fn from_parts(config: ModelConfig, k_split: usize, ids: &[TensorId]) -> TapedModel {
        assert_eq!(
            ids.len(),
            Self::param_tensor_count(&config),
            "wrong number of parameter tensors"
        );
        let mut it = ids.iter().copied();
        let mut next = || it.next().expect("length checked");
        let token_embedding = next();
        let patch_w = next();
        let patch_b = next();
        let text_cls = next();
        let image_cls = next();
        let pos_text = next();
        let pos_image = next();
        let blocks: Vec<TapedBlock> = (0..config.total_layers)
            .map(|_| TapedBlock {
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln1_g: next(),
                ln1_b: next(),
                w_up: next(),
                b_up: next(),
                w_down: next(),
                b_down: next(),
                ln2_g: next(),
                ln2_b: next(),
            })
            .collect();
        TapedModel {
            config,
            k_split,
            token_embedding,
            patch_w,
            patch_b,
            text_cls,
            image_cls,
            pos_text,
            pos_image,
            blocks,
            proj_f: next(),
            proj_g: next(),
            proj_h: next(),
            itm_w: next(),
            itm_b: next(),
            mim_fr_w: next(),
            mim_fr_b: next(),
            mim_kl_w: next(),
            mim_kl_b: next(),
            log_temperature: next(),
            ordered: ids.to_vec(),
        }
    }
}

/// Per-pair encoder outputs with the unit-norm projections.
pub struct EncoderOutputs {
    pub textual_seq: TensorId,
    pub visual_seq: TensorId,
    pub fused_seq: TensorId,
    pub text_len: usize,
    pub w_cls_text: TensorId,
    pub v_cls_image: TensorId,
    pub w_cls_fused: TensorId,
    pub v_cls_fused: TensorId,
    pub f_w: TensorId,
    pub g_v: TensorId,
    pub h_wv: TensorId,
}

/// Rearrange a flat `side x side` pixel grid into `[P, patch_dim]` rows,
/// patches in row-major order.
pub fn image_to_patches<F: Float>(cfg: &ModelConfig, pixels: &[F]) -> Vec<F> {
    assert_eq!(
        pixels.len(),
        cfg.pixel_count(),
        "image has {} pixels, config expects {}",
        pixels.len(),
        cfg.pixel_count()
    );
    let side = cfg.image_side;
    let ps = cfg.image_patch_size;
    let per_side = side / ps;
    let mut out = Vec::with_capacity(pixels.len());
    for pr in 0..per_side {
        for pc in 0..per_side {
            for r in 0..ps {
                let base = (pr * ps + r) * side + pc * ps;
                out.extend_from_slice(&pixels[base..base + ps]);
            }
        }
    }
    out
}

/// Record image pixels as a `[P, patch_dim]` leaf.
pub fn patches_leaf<F: Float>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    pixels: &[F],
    requires_grad: bool,
) -> TensorId {
    let patches = image_to_patches(cfg, pixels);
    tape.leaf(
        patches,
        vec![cfg.num_patches(), cfg.patch_dim()],
        requires_grad,
    )
}

fn block_forward<F: Float>(
    tape: &mut Tape<F>,
    blk: &TapedBlock,
    cfg: &ModelConfig,
    x: TensorId,
) -> TensorId {
    let heads = cfg.num_heads;
    let dh = cfg.hidden_dim / heads;
    let q = tape.matmul(x, blk.wq);
    let q = tape.add_row_bias(q, blk.bq);
    let k = tape.matmul(x, blk.wk);
    let k = tape.add_row_bias(k, blk.bk);
    let v = tape.matmul(x, blk.wv);
    let v = tape.add_row_bias(v, blk.bv);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qs = tape.slice(q, 1, h * dh, dh);
        let ks = tape.slice(k, 1, h * dh, dh);
        let vs = tape.slice(v, 1, h * dh, dh);
        let kt = tape.transpose(ks);
        let scores = tape.matmul(qs, kt);
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax(scaled, 1);
        head_outs.push(tape.matmul(attn, vs));
    }
    let cat = tape.concat(&head_outs, 1);
    let proj = tape.matmul(cat, blk.wo);
    let proj = tape.add_row_bias(proj, blk.bo);
    let res1 = tape.add(x, proj);
    let n1 = tape.layer_norm(res1, blk.ln1_g, blk.ln1_b, LN_EPS);
    let up = tape.matmul(n1, blk.w_up);
    let up = tape.add_row_bias(up, blk.b_up);
    let act = tape.gelu(up);
    let down = tape.matmul(act, blk.w_down);
    let down = tape.add_row_bias(down, blk.b_down);
    let res2 = tape.add(n1, down);
    tape.layer_norm(res2, blk.ln2_g, blk.ln2_b, LN_EPS)
}

/// Embed tokens (with leading `[CLS]`) and run the first K blocks.
pub fn encode_text<F: Float>(tape: &mut Tape<F>, tm: &TapedModel, tokens: &[u16]) -> TensorId {
    let cfg = &tm.config;
    assert!(
        tokens.len() <= cfg.max_text_len,
        "text length {} exceeds max {}",
        tokens.len(),
        cfg.max_text_len
    );
    for &t in tokens {
        assert!(
            (t as usize) < cfg.vocab_size,
            "token id {t} out of vocabulary {}",
            cfg.vocab_size
        );
    }
    let seq = if tokens.is_empty() {
        tape.gather_rows(tm.text_cls, &[0])
    } else {
        let rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let emb = tape.gather_rows(tm.token_embedding, &rows);
        tape.concat(&[tm.text_cls, emb], 0)
    };
    let pos = tape.slice(tm.pos_text, 0, 0, tokens.len() + 1);
    let mut x = tape.add(seq, pos);
    for blk in &tm.blocks[..tm.k_split] {
        x = block_forward(tape, blk, cfg, x);
    }
    x
}

/// Patch-project an image (with leading image `[CLS]`). No transformer
/// blocks run before fusion; the visual path is the linear patch embedding.
/// The `[CLS]` slot receives the mean of the patch embeddings so that the
/// pre-fusion image representation (and hence g(v)) depends on the pixels.
pub fn encode_image<F: Float>(tape: &mut Tape<F>, tm: &TapedModel, patches: TensorId) -> TensorId {
    let cfg = &tm.config;
    let p = cfg.num_patches();
    assert_eq!(
        tape.shape(patches),
        &[p, cfg.patch_dim()],
        "patch grid does not match config"
    );
    let proj = tape.matmul(patches, tm.patch_w);
    let proj = tape.add_row_bias(proj, tm.patch_b);
    let pool_weights = tape.constant(vec![F::from_f64(1.0 / p as f64); p], vec![1, p]);
    let pooled = tape.matmul(pool_weights, proj);
    let cls = tape.add(tm.image_cls, pooled);
    let seq = tape.concat(&[cls, proj], 0);
    let pos = tape.slice(tm.pos_image, 0, 0, p + 1);
    tape.add(seq, pos)
}

/// Concatenate text and image sequences and run the remaining M blocks with
/// full bidirectional attention. Both `[CLS]` rows stay in place.
pub fn fuse<F: Float>(
    tape: &mut Tape<F>,
    tm: &TapedModel,
    textual_seq: TensorId,
    visual_seq: TensorId,
) -> TensorId {
    let cfg = &tm.config;
    assert_eq!(tape.shape(textual_seq)[1], cfg.hidden_dim);
    assert_eq!(tape.shape(visual_seq)[1], cfg.hidden_dim);
    let mut x = tape.concat(&[textual_seq, visual_seq], 0);
    for blk in &tm.blocks[tm.k_split..] {
        x = block_forward(tape, blk, cfg, x);
    }
    x
}

fn project_unit<F: Float>(tape: &mut Tape<F>, row: TensorId, proj: TensorId) -> TensorId {
    let p = tape.matmul(row, proj);
    tape.l2_normalize_rows(p)
}

/// Full pass over one pair: returns the three sequences, both fused `[CLS]`
/// rows, and the unit-norm projections f(w), g(v), h(w, v).
pub fn forward_pair<F: Float>(
    tape: &mut Tape<F>,
    tm: &TapedModel,
    tokens: &[u16],
    patches: TensorId,
) -> EncoderOutputs {
    let textual_seq = encode_text(tape, tm, tokens);
    let visual_seq = encode_image(tape, tm, patches);
    let fused_seq = fuse(tape, tm, textual_seq, visual_seq);
    let text_len = tokens.len();
    let w_cls_text = tape.gather_rows(textual_seq, &[0]);
    let v_cls_image = tape.gather_rows(visual_seq, &[0]);
    let w_cls_fused = tape.gather_rows(fused_seq, &[0]);
    let v_cls_fused = tape.gather_rows(fused_seq, &[text_len + 1]);
    let f_w = project_unit(tape, w_cls_text, tm.proj_f);
    let g_v = project_unit(tape, v_cls_image, tm.proj_g);
    let h_wv = project_unit(tape, w_cls_fused, tm.proj_h);
    EncoderOutputs {
        textual_seq,
        visual_seq,
        fused_seq,
        text_len,
        w_cls_text,
        v_cls_image,
        w_cls_fused,
        v_cls_fused,
        f_w,
        g_v,
        h_wv,
    }
}

/// Text-only query embedding f(w): text encoder and projection, never the
/// fusion stack.
pub fn embed_text_query<F: Float>(tape: &mut Tape<F>, tm: &TapedModel, tokens: &[u16]) -> TensorId {
    let seq = encode_text(tape, tm, tokens);
    let cls = tape.gather_rows(seq, &[0]);
    project_unit(tape, cls, tm.proj_f)
}

/// Image-only query embedding g(v): patch embedding and projection, no
/// transformer blocks at all.
pub fn embed_image_query<F: Float>(
    tape: &mut Tape<F>,
    tm: &TapedModel,
    patches: TensorId,
) -> TensorId {
    let seq = encode_image(tape, tm, patches);
    let cls = tape.gather_rows(seq, &[0]);
    project_unit(tape, cls, tm.proj_g)
}

/// `1 / tau` on the tape, with tau = exp(log_temperature) clamped to
/// `[TAU_MIN, TAU_MAX]`. Gradient flows to the temperature parameter.
pub fn taped_inv_temperature<F: Float>(tape: &mut Tape<F>, tm: &TapedModel) -> TensorId {
    let clamped = tape.clamp(tm.log_temperature, TAU_MIN.ln(), TAU_MAX.ln());
    let neg = tape.scale(clamped, -1.0);
    tape.exp(neg)
}
