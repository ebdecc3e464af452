//! Deterministic synthetic corpus: image-text pairs, cross-modal /
//! cross-pair quadruples, and labeled downstream splits.
//!
//! Images are stored as packed seeds and materialized on the fly as
//! concept prototype + attribute stamps + seeded noise, so corpora are tiny
//! and bit-reproducible. Text is sampled from per-concept token themes plus
//! attribute tokens shared with the paired image, which gives retrieval an
//! instance-level signal (not just concept-level).

mod generate;
mod load;

pub use generate::{generate_corpus, GenConfig};
pub use load::{CrossPairBatches, CrossPairDataset, PairBatches, PairDataset};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PAIRS_FILE: &str = "pairs.tsv";
pub const CROSSPAIRS_FILE: &str = "crosspairs.tsv";

/// Downstream split files, pairs format.
pub const CC_TRAIN: &str = "cc_train.tsv";
pub const CC_EVAL: &str = "cc_eval.tsv";
pub const MPC_TRAIN: &str = "mpc_train.tsv";
pub const MPC_EVAL: &str = "mpc_eval.tsv";
pub const T2I_TRAIN: &str = "t2i_train.tsv";
pub const T2I_EVAL: &str = "t2i_eval.tsv";
/// Downstream split files, crosspairs format.
pub const Q2P_TRAIN: &str = "q2p_train.tsv";
pub const Q2P_EVAL: &str = "q2p_eval.tsv";
pub const I2P_TRAIN: &str = "i2p_train.tsv";
pub const I2P_EVAL: &str = "i2p_eval.tsv";

/// Token-id layout. Ids below `THEME_BASE` are reserved (`[MASK]` is 0).
pub const THEME_BASE: u16 = 32;
/// Theme tokens per concept.
pub const THEME_SIZE: u16 = 8;
/// First attribute token id.
pub const ATTR_BASE: u16 = 160;
/// Number of attribute tokens.
pub const ATTR_COUNT: u16 = 24;
/// First noise token id; noise runs to the end of the vocabulary.
pub const NOISE_BASE: u16 = 184;

/// Attributes stamped into each instance.
pub const ATTRS_PER_INSTANCE: usize = 2;

/// One image-text pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRecord {
    pub record_id: u64,
    pub concept_id: u32,
    pub image_seed: u64,
    pub tokens: Vec<u16>,
}

/// Modality presence of one side of a cross-pair record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalityFlags {
    pub has_text: bool,
    pub has_image: bool,
}

impl ModalityFlags {
    pub fn multimodal(&self) -> bool {
        self.has_text && self.has_image
    }

    pub fn validate(&self) -> Result<()> {
        if !self.has_text && !self.has_image {
            return Err(Error::Data("source with no modality".into()));
        }
        Ok(())
    }
}

/// The three cross-pair data sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    /// Text query linked to a clicked product page (text-only source).
    QueryClick,
    /// Multimodal post with a tagged product (full source).
    Tag,
    /// Another view of the product image (image-only source).
    ProductView,
}

impl Relation {
    pub fn tag(&self) -> &'static str {
        match self {
            Relation::QueryClick => "query-click",
            Relation::Tag => "tag",
            Relation::ProductView => "product-view",
        }
    }

    pub fn from_tag(s: &str) -> Result<Self> {
        match s {
            "query-click" => Ok(Relation::QueryClick),
            "tag" => Ok(Relation::Tag),
            "product-view" => Ok(Relation::ProductView),
            other => Err(Error::Format(format!("unknown relation tag {other:?}"))),
        }
    }

    pub fn source_flags(&self) -> ModalityFlags {
        match self {
            Relation::QueryClick => ModalityFlags {
                has_text: true,
                has_image: false,
            },
            Relation::Tag => ModalityFlags {
                has_text: true,
                has_image: true,
            },
            Relation::ProductView => ModalityFlags {
                has_text: false,
                has_image: true,
            },
        }
    }
}

/// A (source, target) quadruple; the source may lack one modality, the
/// target is always a full pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossPairRecord {
    pub record_id: u64,
    pub relation: Relation,
    pub source_tokens: Option<Vec<u16>>,
    pub source_image_seed: Option<u64>,
    pub target_tokens: Vec<u16>,
    pub target_image_seed: u64,
}

impl CrossPairRecord {
    pub fn source_flags(&self) -> ModalityFlags {
        ModalityFlags {
            has_text: self.source_tokens.is_some(),
            has_image: self.source_image_seed.is_some(),
        }
    }
}

/// A materialized image-text pair ready for the tape.
#[derive(Debug, Clone)]
pub struct PairInstance {
    pub record_id: u64,
    pub concept_id: u32,
    pub tokens: Vec<u16>,
    pub pixels: Vec<f32>,
}

/// A materialized quadruple ready for the tape; placeholders already
/// substituted (empty tokens / grey pixels).
#[derive(Debug, Clone)]
pub struct QuadInstance {
    pub record_id: u64,
    pub source_tokens: Vec<u16>,
    pub source_pixels: Vec<f32>,
    pub source_flags: ModalityFlags,
    pub target_tokens: Vec<u16>,
    pub target_pixels: Vec<f32>,
}

/// Corpus manifest: key=value lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub n_concepts: usize,
    pub mpc_concepts: usize,
    pub n_pairs: usize,
    pub n_crosspairs: usize,
    pub vocab_size: usize,
    pub image_side: usize,
    /// Noise standard deviation in thousandths (exact integer round-trip).
    pub noise_milli: u32,
}

pub const MANIFEST_VERSION: u32 = 1;

impl Manifest {
    pub fn total_concepts(&self) -> usize {
        self.n_concepts + self.mpc_concepts
    }

    pub fn render(&self) -> String {
        format!(
            "version={}\nseed={}\nn_concepts={}\nmpc_concepts={}\nn_pairs={}\n\
             n_crosspairs={}\nvocab_size={}\nimage_side={}\nnoise_milli={}\n",
            self.version,
            self.seed,
            self.n_concepts,
            self.mpc_concepts,
            self.n_pairs,
            self.n_crosspairs,
            self.vocab_size,
            self.image_side,
            self.noise_milli,
        )
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let mut version = None;
        let mut seed = None;
        let mut n_concepts = None;
        let mut mpc_concepts = None;
        let mut n_pairs = None;
        let mut n_crosspairs = None;
        let mut vocab_size = None;
        let mut image_side = None;
        let mut noise_milli = None;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line {}: missing '='", ln + 1)))?;
            let parse_u64 = || -> Result<u64> {
                value.trim().parse::<u64>().map_err(|_| {
                    Error::Format(format!("manifest key {key}: bad integer {value:?}"))
                })
            };
            match key.trim() {
                "version" => version = Some(parse_u64()? as u32),
                "seed" => seed = Some(parse_u64()?),
                "n_concepts" => n_concepts = Some(parse_u64()? as usize),
                "mpc_concepts" => mpc_concepts = Some(parse_u64()? as usize),
                "n_pairs" => n_pairs = Some(parse_u64()? as usize),
                "n_crosspairs" => n_crosspairs = Some(parse_u64()? as usize),
                "vocab_size" => vocab_size = Some(parse_u64()? as usize),
                "image_side" => image_side = Some(parse_u64()? as usize),
                "noise_milli" => noise_milli = Some(parse_u64()? as u32),
                other => {
                    return Err(Error::Format(format!("manifest: unknown key {other:?}")));
                }
            }
        }
        let missing = |what: &str| Error::Format(format!("manifest: missing key {what}"));
        let m = Manifest {
            version: version.ok_or_else(|| missing("version"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            n_concepts: n_concepts.ok_or_else(|| missing("n_concepts"))?,
            mpc_concepts: mpc_concepts.unwrap_or(0),
            n_pairs: n_pairs.ok_or_else(|| missing("n_pairs"))?,
            n_crosspairs: n_crosspairs.ok_or_else(|| missing("n_crosspairs"))?,
            vocab_size: vocab_size.ok_or_else(|| missing("vocab_size"))?,
            image_side: image_side.ok_or_else(|| missing("image_side"))?,
            noise_milli: noise_milli.unwrap_or(100),
        };
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "manifest: unsupported version {} (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        if m.image_side == 0 || m.image_side > 4096 {
            return Err(Error::Format(format!(
                "manifest: implausible image_side {}",
                m.image_side
            )));
        }
        if m.total_concepts() == 0 || m.total_concepts() > 16 {
            return Err(Error::Format(format!(
                "manifest: concept count {} outside 1..=16",
                m.total_concepts()
            )));
        }
        Ok(m)
    }
}

// ── image seed packing ──────────────────────────────────────────────

/// image_seed layout: concept (8 bits) | attr1 (8) | attr2 (8) | noise (40).
pub fn pack_image_seed(concept: u32, attr1: u8, attr2: u8, noise: u64) -> u64 {
    ((concept as u64 & 0xff) << 56)
        | ((attr1 as u64) << 48)
        | ((attr2 as u64) << 40)
        | (noise & 0xff_ffff_ffff)
}

pub fn unpack_image_seed(seed: u64) -> (u32, u8, u8, u64) {
    (
        ((seed >> 56) & 0xff) as u32,
        ((seed >> 48) & 0xff) as u8,
        ((seed >> 40) & 0xff) as u8,
        seed & 0xff_ffff_ffff,
    )
}

/// Concept id embedded in an image seed.
pub fn image_seed_concept(seed: u64) -> u32 {
    unpack_image_seed(seed).0
}

/// All-grey placeholder for a missing image.
pub fn grey_image(side: usize) -> Vec<f32> {
    vec![crate::masking::GREY_PIXEL; side * side]
}

/// Theme token range of one concept.
pub fn theme_range(concept: u32) -> std::ops::Range<u16> {
    let lo = THEME_BASE + concept as u16 * THEME_SIZE;
    lo..lo + THEME_SIZE
}

/// Majority-vote concept of a token sequence (theme tokens only).
pub fn dominant_concept(tokens: &[u16], total_concepts: usize) -> Option<u32> {
    let mut counts = vec![0usize; total_concepts];
    for &t in tokens {
        if (THEME_BASE..ATTR_BASE).contains(&t) {
            let c = ((t - THEME_BASE) / THEME_SIZE) as usize;
            if c < total_concepts {
                counts[c] += 1;
            }
        }
    }
    counts
        .iter()
        .enumerate()
        .max_by_key(|(_, &n)| n)
        .filter(|(_, &n)| n > 0)
        .map(|(c, _)| c as u32)
}

/// Materializes images from packed seeds: prototype + attribute stamps +
/// clamped Gaussian noise.
#[derive(Debug, Clone)]
pub struct Materializer {
    prototypes: Vec<Vec<f32>>,
    side: usize,
    noise_std: f64,
}

impl Materializer {
    /// Prototypes are coarse 4x4 seeded lattices upsampled to the full grid,
    /// derived from the corpus seed; distinct concepts get distinct fields.
    pub fn new(corpus_seed: u64, total_concepts: usize, side: usize, noise_std: f64) -> Self {
        let coarse = 4usize;
        let cell = side.div_ceil(coarse);
        let prototypes = (0..total_concepts)
            .map(|c| {
                let mut rng = Rng::seed_from(
                    corpus_seed ^ (c as u64 + 1).wrapping_mul(0x517c_c1b7_2722_0a95),
                );
                let lattice: Vec<f32> = (0..coarse * coarse)
                    .map(|_| 0.15 + 0.7 * rng.next_f32())
                    .collect();
                let mut px = Vec::with_capacity(side * side);
                for r in 0..side {
                    for col in 0..side {
                        let lr = (r / cell).min(coarse - 1);
                        let lc = (col / cell).min(coarse - 1);
                        px.push(lattice[lr * coarse + lc]);
                    }
                }
                px
            })
            .collect();
        Materializer {
            prototypes,
            side,
            noise_std,
        }
    }

    pub fn prototype(&self, concept: u32) -> &[f32] {
        &self.prototypes[concept as usize]
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Stamp an attribute into two designated 8x8 patch regions. Each
    /// attribute id owns a fixed random sign template, so distinct
    /// attributes perturb pixel space along distinct directions; two
    /// patches at +-0.5 keep the signal above the pooled noise floor of
    /// the image `[CLS]` (mean over 16 patches of sigma-0.1 noise).
    fn stamp(&self, pixels: &mut [f32], attr: u8) {
        let patch_size = 8usize;
        let per_side = self.side / patch_size;
        if per_side == 0 {
            return;
        }
        let cells = per_side * per_side;
        let first = (2 + (attr as usize % 12)) % cells;
        let second = (first + 7) % cells;
        let mut template_rng =
            Rng::seed_from(0x57a3_9000 ^ (attr as u64 + 1).wrapping_mul(0x9e37_79b9));
        for patch in [first, second] {
            let (pr, pc) = (patch / per_side, patch % per_side);
            for r in 0..patch_size.min(self.side) {
                for c in 0..patch_size.min(self.side) {
                    let row = pr * patch_size + r;
                    let col = pc * patch_size + c;
                    let delta = if template_rng.bernoulli(0.5) {
                        0.5
                    } else {
                        -0.5
                    };
                    if row >= self.side || col >= self.side {
                        continue;
                    }
                    pixels[row * self.side + col] += delta;
                }
            }
        }
    }

    /// Bit-reproducible image for a packed seed.
    pub fn materialize(&self, image_seed: u64) -> Vec<f32> {
        let (concept, a1, a2, noise_seed) = unpack_image_seed(image_seed);
        assert!(
            (concept as usize) < self.prototypes.len(),
            "concept {concept} out of range"
        );
        let mut px = self.prototypes[concept as usize].clone();
        self.stamp(&mut px, a1);
        self.stamp(&mut px, a2);
        let mut rng = Rng::seed_from(noise_seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0x5eed);
        for v in px.iter_mut() {
            *v = (*v + rng.normal_f32(self.noise_std as f32)).clamp(0.0, 1.0);
        }
        px
    }
}

// ── line parsers (fuzz entry points: must never panic) ─────────────

fn parse_tokens(field: &str) -> Result<Vec<u16>> {
    let mut out = Vec::new();
    for part in field.split(' ') {
        if part.is_empty() {
            continue;
        }
        let id: u16 = part
            .parse()
            .map_err(|_| Error::Format(format!("bad token id {part:?}")))?;
        out.push(id);
    }
    Ok(out)
}

fn render_tokens(tokens: &[u16]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parse one pairs-file line: `record_id \t concept_id \t image_seed \t tokens`.
pub fn parse_pair_line(line: &str) -> Result<PairRecord> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(Error::Format(format!(
            "pair record: expected 4 tab-separated fields, got {}",
            fields.len()
        )));
    }
    let record_id: u64 = fields[0]
        .parse()
        .map_err(|_| Error::Format(format!("pair record: bad record_id {:?}", fields[0])))?;
    let concept_id: u32 = fields[1]
        .parse()
        .map_err(|_| Error::Format(format!("pair record: bad concept_id {:?}", fields[1])))?;
    let image_seed: u64 = fields[2]
        .parse()
        .map_err(|_| Error::Format(format!("pair record: bad image_seed {:?}", fields[2])))?;
    let tokens = parse_tokens(fields[3])?;
    Ok(PairRecord {
        record_id,
        concept_id,
        image_seed,
        tokens,
    })
}

pub fn render_pair_line(rec: &PairRecord) -> String {
    format!(
        "{}\t{}\t{}\t{}",
        rec.record_id,
        rec.concept_id,
        rec.image_seed,
        render_tokens(&rec.tokens)
    )
}

/// Parse one crosspairs-file line:
/// `record_id \t relation \t flags \t src_tokens|- \t src_seed|- \t tgt_tokens \t tgt_seed`.
pub fn parse_crosspair_line(line: &str) -> Result<CrossPairRecord> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 7 {
        return Err(Error::Format(format!(
            "crosspair record: expected 7 tab-separated fields, got {}",
            fields.len()
        )));
    }
    let record_id: u64 = fields[0]
        .parse()
        .map_err(|_| Error::Format(format!("crosspair record: bad record_id {:?}", fields[0])))?;
    let relation = Relation::from_tag(fields[1])?;
    let flags = fields[2];
    let expect = relation.source_flags();
    let expect_str = format!(
        "{}{}",
        if expect.has_text { 't' } else { '-' },
        if expect.has_image { 'i' } else { '-' }
    );
    if flags != expect_str {
        return Err(Error::Format(format!(
            "crosspair record: flags {flags:?} do not match relation {} (expected {expect_str:?})",
            relation.tag()
        )));
    }
    let source_tokens = if fields[3] == "-" {
        None
    } else {
        Some(parse_tokens(fields[3])?)
    };
    let source_image_seed = if fields[4] == "-" {
        None
    } else {
        Some(fields[4].parse::<u64>().map_err(|_| {
            Error::Format(format!("crosspair record: bad source seed {:?}", fields[4]))
        })?)
    };
    if source_tokens.is_some() != expect.has_text || source_image_seed.is_some() != expect.has_image
    {
        return Err(Error::Format(
            "crosspair record: source fields disagree with flags".into(),
        ));
    }
    let target_tokens = parse_tokens(fields[5])?;
    if target_tokens.is_empty() {
        return Err(Error::Format(
            "crosspair record: empty target tokens".into(),
        ));
    }
    let target_image_seed: u64 = fields[6]
        .parse()
        .map_err(|_| Error::Format(format!("crosspair record: bad target seed {:?}", fields[6])))?;
    Ok(CrossPairRecord {
        record_id,
        relation,
        source_tokens,
        source_image_seed,
        target_tokens,
        target_image_seed,
    })
}

pub fn render_crosspair_line(rec: &CrossPairRecord) -> String {
    let flags = rec.source_flags();
    format!(
        "{}\t{}\t{}{}\t{}\t{}\t{}\t{}",
        rec.record_id,
        rec.relation.tag(),
        if flags.has_text { 't' } else { '-' },
        if flags.has_image { 'i' } else { '-' },
        rec.source_tokens
            .as_ref()
            .map(|t| render_tokens(t))
            .unwrap_or_else(|| "-".into()),
        rec.source_image_seed
            .map(|s| s.to_string())
            .unwrap_or_else(|| "-".into()),
        render_tokens(&rec.target_tokens),
        rec.target_image_seed
    )
}
