//! Corpus generation. Everything is a pure function of (config, seed).

use std::fmt::Write as _;
use std::path::Path;

use super::*;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    /// Main concept classes (pre-training + CC/T2I/Q2P/I2P).
    pub n_concepts: usize,
    /// Disjoint concept classes for the MPC split.
    pub mpc_concepts: usize,
    pub n_pairs: usize,
    pub n_crosspairs: usize,
    /// Records per downstream train split.
    pub downstream_train: usize,
    /// Records per downstream eval split (retrieval candidate pool size).
    pub downstream_eval: usize,
    pub vocab_size: usize,
    pub image_side: usize,
    /// Pixel noise sigma.
    pub noise_std: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_concepts: 10,
            mpc_concepts: 6,
            n_pairs: 2000,
            n_crosspairs: 1000,
            downstream_train: 160,
            downstream_eval: 200,
            vocab_size: 256,
            image_side: 32,
            noise_std: 0.1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_concepts < 2 {
            return Err(Error::Config("n_concepts must be at least 2".into()));
        }
        let total = self.n_concepts + self.mpc_concepts;
        if total > 16 {
            return Err(Error::Config(format!(
                "{total} concepts exceed the token-theme budget of 16"
            )));
        }
        let theme_top = THEME_BASE + total as u16 * THEME_SIZE;
        if theme_top > ATTR_BASE {
            return Err(Error::Config(
                "token themes overflow attribute range".into(),
            ));
        }
        if self.vocab_size < NOISE_BASE as usize + 8 {
            return Err(Error::Config(format!(
                "vocab_size {} too small for the token layout",
                self.vocab_size
            )));
        }
        if self.vocab_size > u16::MAX as usize {
            return Err(Error::Config("vocab_size exceeds u16 range".into()));
        }
        if self.image_side == 0 || !(0.0..1.0).contains(&self.noise_std) {
            return Err(Error::Config("bad image geometry or noise".into()));
        }
        if self.n_pairs == 0 || self.n_crosspairs == 0 {
            return Err(Error::Config("empty corpus requested".into()));
        }
        Ok(())
    }

    pub fn manifest(&self, seed: u64) -> Manifest {
        Manifest {
            version: MANIFEST_VERSION,
            seed,
            n_concepts: self.n_concepts,
            mpc_concepts: self.mpc_concepts,
            n_pairs: self.n_pairs,
            n_crosspairs: self.n_crosspairs,
            vocab_size: self.vocab_size,
            image_side: self.image_side,
            noise_milli: (self.noise_std * 1000.0).round() as u32,
        }
    }
}

struct Generator {
    cfg: GenConfig,
    next_record_id: u64,
}

impl Generator {
    /// 8-24 tokens: two attribute tokens plus theme draws with 10% noise,
    /// order shuffled.
    fn sample_tokens(&self, concept: u32, attrs: (u8, u8), rng: &mut Rng) -> Vec<u16> {
        let len = 8 + rng.below(17); // 8..=24
        let mut tokens = Vec::with_capacity(len);
        tokens.push(ATTR_BASE + attrs.0 as u16);
        tokens.push(ATTR_BASE + attrs.1 as u16);
        let theme = theme_range(concept);
        let noise_span = self.cfg.vocab_size as u16 - NOISE_BASE;
        while tokens.len() < len {
            if rng.bernoulli(0.10) {
                tokens.push(NOISE_BASE + rng.below(noise_span as usize) as u16);
            } else {
                tokens.push(theme.start + rng.below(THEME_SIZE as usize) as u16);
            }
        }
        rng.shuffle(&mut tokens);
        tokens
    }

    fn sample_attrs(&self, rng: &mut Rng) -> (u8, u8) {
        let a1 = rng.below(ATTR_COUNT as usize) as u8;
        let mut a2 = rng.below(ATTR_COUNT as usize - 1) as u8;
        if a2 >= a1 {
            a2 += 1;
        }
        (a1, a2)
    }

    fn pair(&mut self, concept: u32, rng: &mut Rng) -> PairRecord {
        let attrs = self.sample_attrs(rng);
        let noise = rng.next_u64() & 0xff_ffff_ffff;
        let record_id = self.next_record_id;
        self.next_record_id += 1;
        PairRecord {
            record_id,
            concept_id: concept,
            image_seed: pack_image_seed(concept, attrs.0, attrs.1, noise),
            tokens: self.sample_tokens(concept, attrs, rng),
        }
    }

    fn crosspair(&mut self, concept: u32, relation: Relation, rng: &mut Rng) -> CrossPairRecord {
        let attrs = self.sample_attrs(rng);
        let target_noise = rng.next_u64() & 0xff_ffff_ffff;
        let target_tokens = self.sample_tokens(concept, attrs, rng);
        let target_image_seed = pack_image_seed(concept, attrs.0, attrs.1, target_noise);
        // The source describes the same product instance: same concept and
        // attributes, fresh noise / fresh token draw.
        let (source_tokens, source_image_seed) = match relation {
            Relation::QueryClick => (Some(self.sample_tokens(concept, attrs, rng)), None),
            Relation::Tag => {
                let noise = rng.next_u64() & 0xff_ffff_ffff;
                (
                    Some(self.sample_tokens(concept, attrs, rng)),
                    Some(pack_image_seed(concept, attrs.0, attrs.1, noise)),
                )
            }
            Relation::ProductView => {
                let noise = rng.next_u64() & 0xff_ffff_ffff;
                (
                    None,
                    Some(pack_image_seed(concept, attrs.0, attrs.1, noise)),
                )
            }
        };
        let record_id = self.next_record_id;
        self.next_record_id += 1;
        CrossPairRecord {
            record_id,
            relation,
            source_tokens,
            source_image_seed,
            target_tokens,
            target_image_seed,
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Generate the full corpus directory: pre-training pairs and cross-pairs,
/// downstream train/eval splits, and the manifest. Byte-deterministic under
/// (config, seed).
pub fn generate_corpus(out_dir: &Path, cfg: &GenConfig, seed: u64) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = Rng::seed_from(seed ^ 0x6e6_f111);
    let mut g = Generator {
        cfg: *cfg,
        next_record_id: 0,
    };

    let render_pairs = |records: &[PairRecord]| {
        let mut s = String::new();
        for r in records {
            let _ = writeln!(s, "{}", render_pair_line(r));
        }
        s
    };
    let render_crosspairs = |records: &[CrossPairRecord]| {
        let mut s = String::new();
        for r in records {
            let _ = writeln!(s, "{}", render_crosspair_line(r));
        }
        s
    };

    // Pre-training pairs: concepts drawn uniformly.
    let pairs: Vec<PairRecord> = (0..cfg.n_pairs)
        .map(|_| {
            let c = rng.below(cfg.n_concepts) as u32;
            g.pair(c, &mut rng)
        })
        .collect();
    write_file(&out_dir.join(PAIRS_FILE), &render_pairs(&pairs))?;

    // Pre-training cross-pairs: relations cycle through the three sources.
    let relations = [Relation::QueryClick, Relation::Tag, Relation::ProductView];
    let crosspairs: Vec<CrossPairRecord> = (0..cfg.n_crosspairs)
        .map(|i| {
            let c = rng.below(cfg.n_concepts) as u32;
            g.crosspair(c, relations[i % 3], &mut rng)
        })
        .collect();
    write_file(
        &out_dir.join(CROSSPAIRS_FILE),
        &render_crosspairs(&crosspairs),
    )?;

    // Downstream pair splits: concepts round-robin so classes are balanced.
    let mut pair_split = |n: usize, base: u32, span: usize, rng: &mut Rng| -> Vec<PairRecord> {
        (0..n)
            .map(|i| g.pair(base + (i % span) as u32, rng))
            .collect()
    };
    let cc_train = pair_split(cfg.downstream_train, 0, cfg.n_concepts, &mut rng);
    let cc_eval = pair_split(cfg.downstream_eval, 0, cfg.n_concepts, &mut rng);
    write_file(&out_dir.join(CC_TRAIN), &render_pairs(&cc_train))?;
    write_file(&out_dir.join(CC_EVAL), &render_pairs(&cc_eval))?;

    let mpc_base = cfg.n_concepts as u32;
    let mpc_train = pair_split(cfg.downstream_train, mpc_base, cfg.mpc_concepts, &mut rng);
    let mpc_eval = pair_split(cfg.downstream_eval, mpc_base, cfg.mpc_concepts, &mut rng);
    write_file(&out_dir.join(MPC_TRAIN), &render_pairs(&mpc_train))?;
    write_file(&out_dir.join(MPC_EVAL), &render_pairs(&mpc_eval))?;

    let t2i_train = pair_split(cfg.downstream_train, 0, cfg.n_concepts, &mut rng);
    let t2i_eval = pair_split(cfg.downstream_eval, 0, cfg.n_concepts, &mut rng);
    write_file(&out_dir.join(T2I_TRAIN), &render_pairs(&t2i_train))?;
    write_file(&out_dir.join(T2I_EVAL), &render_pairs(&t2i_eval))?;

    // Downstream cross-pair splits: fixed relation per task.
    let mut cross_split = |n: usize, relation: Relation, rng: &mut Rng| -> Vec<CrossPairRecord> {
        (0..n)
            .map(|i| g.crosspair((i % cfg.n_concepts) as u32, relation, rng))
            .collect()
    };
    let q2p_train = cross_split(cfg.downstream_train, Relation::QueryClick, &mut rng);
    let q2p_eval = cross_split(cfg.downstream_eval, Relation::QueryClick, &mut rng);
    write_file(&out_dir.join(Q2P_TRAIN), &render_crosspairs(&q2p_train))?;
    write_file(&out_dir.join(Q2P_EVAL), &render_crosspairs(&q2p_eval))?;

    let i2p_train = cross_split(cfg.downstream_train, Relation::ProductView, &mut rng);
    let i2p_eval = cross_split(cfg.downstream_eval, Relation::ProductView, &mut rng);
    write_file(&out_dir.join(I2P_TRAIN), &render_crosspairs(&i2p_train))?;
    write_file(&out_dir.join(I2P_EVAL), &render_crosspairs(&i2p_eval))?;

    let manifest = cfg.manifest(seed);
    write_file(&out_dir.join(MANIFEST_FILE), &manifest.render())?;
    Ok(manifest)
}
