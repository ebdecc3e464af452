//! Loading and batch iteration. The loader validates records against the
//! manifest; images materialize lazily from their packed seeds.

use std::path::Path;

use super::*;
use crate::error::{Error, Result};
use crate::rng::Rng;

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

fn load_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(|e| Error::io(dir, e))?;
    Manifest::parse(&text)
}

/// An image-text pair file bound to its corpus manifest.
#[derive(Debug)]
pub struct PairDataset {
    pub manifest: Manifest,
    pub records: Vec<PairRecord>,
    materializer: Materializer,
}

impl PairDataset {
    pub fn load(dir: &Path, file: &str) -> Result<Self> {
        let manifest = load_manifest(dir)?;
        let path = dir.join(file);
        let mut records = Vec::new();
        for (ln, line) in read_lines(&path)?.iter().enumerate() {
            if line.is_empty() {
                continue;
            }
            let rec = parse_pair_line(line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), ln + 1)))?;
            validate_pair(&rec, &manifest)?;
            records.push(rec);
        }
        let materializer = Materializer::new(
            manifest.seed,
            manifest.total_concepts(),
            manifest.image_side,
            manifest.noise_milli as f64 / 1000.0,
        );
        Ok(PairDataset {
            manifest,
            records,
            materializer,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn materialize(&self, rec: &PairRecord) -> Vec<f32> {
        self.materializer.materialize(rec.image_seed)
    }

    pub fn materializer(&self) -> &Materializer {
        &self.materializer
    }

    /// Materialize a batch of records by index.
    pub fn instances(&self, idxs: &[usize]) -> Vec<PairInstance> {
        idxs.iter()
            .map(|&i| {
                let r = &self.records[i];
                PairInstance {
                    record_id: r.record_id,
                    concept_id: r.concept_id,
                    tokens: r.tokens.clone(),
                    pixels: self.materialize(r),
                }
            })
            .collect()
    }

    /// Seeded epoch-shuffled batch stream; a trailing partial batch is
    /// dropped.
    pub fn batches(&self, batch_size: usize, seed: u64) -> PairBatches<'_> {
        assert!(batch_size > 0 && batch_size <= self.records.len());
        PairBatches {
            dataset: self,
            order: Vec::new(),
            pos: 0,
            batch_size,
            rng: Rng::seed_from(seed),
        }
    }
}

fn validate_pair(rec: &PairRecord, manifest: &Manifest) -> Result<()> {
    for &t in &rec.tokens {
        if t as usize >= manifest.vocab_size {
            return Err(Error::Data(format!(
                "record {}: token id {t} >= vocab_size {}",
                rec.record_id, manifest.vocab_size
            )));
        }
    }
    let packed = image_seed_concept(rec.image_seed);
    if packed != rec.concept_id {
        return Err(Error::Data(format!(
            "record {}: image seed encodes concept {packed}, column says {}",
            rec.record_id, rec.concept_id
        )));
    }
    if rec.concept_id as usize >= manifest.total_concepts() {
        return Err(Error::Data(format!(
            "record {}: concept {} out of range",
            rec.record_id, rec.concept_id
        )));
    }
    Ok(())
}

/// Epoch iterator over pair batches.
pub struct PairBatches<'a> {
    dataset: &'a PairDataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: Rng,
}

impl<'a> PairBatches<'a> {
    /// Batches per epoch (`n / batch_size`, floor).
    pub fn per_epoch(&self) -> usize {
        self.dataset.len() / self.batch_size
    }

    /// Next batch of record indices, reshuffling at epoch boundaries.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let n = self.dataset.len();
        let usable = self.per_epoch() * self.batch_size;
        if self.order.len() != n || self.pos + self.batch_size > usable {
            self.order = (0..n).collect();
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let batch = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        batch
    }
}

/// A cross-pair file bound to its corpus manifest.
#[derive(Debug)]
pub struct CrossPairDataset {
    pub manifest: Manifest,
    pub records: Vec<CrossPairRecord>,
    materializer: Materializer,
}

impl CrossPairDataset {
    pub fn load(dir: &Path, file: &str) -> Result<Self> {
        let manifest = load_manifest(dir)?;
        let path = dir.join(file);
        let mut records = Vec::new();
        for (ln, line) in read_lines(&path)?.iter().enumerate() {
            if line.is_empty() {
                continue;
            }
            let rec = parse_crosspair_line(line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), ln + 1)))?;
            validate_crosspair(&rec, &manifest)?;
            records.push(rec);
        }
        let materializer = Materializer::new(
            manifest.seed,
            manifest.total_concepts(),
            manifest.image_side,
            manifest.noise_milli as f64 / 1000.0,
        );
        Ok(CrossPairDataset {
            manifest,
            records,
            materializer,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn materializer(&self) -> &Materializer {
        &self.materializer
    }

    /// Target image pixels.
    pub fn materialize_target(&self, rec: &CrossPairRecord) -> Vec<f32> {
        self.materializer.materialize(rec.target_image_seed)
    }

    /// Source image pixels, or the grey placeholder when absent.
    pub fn materialize_source(&self, rec: &CrossPairRecord) -> Vec<f32> {
        match rec.source_image_seed {
            Some(seed) => self.materializer.materialize(seed),
            None => grey_image(self.manifest.image_side),
        }
    }

    /// Source tokens, or the empty placeholder when absent.
    pub fn source_tokens<'r>(&self, rec: &'r CrossPairRecord) -> &'r [u16] {
        rec.source_tokens.as_deref().unwrap_or(&[])
    }

    /// Materialize a batch of quadruples by index, placeholders included.
    pub fn instances(&self, idxs: &[usize]) -> Vec<QuadInstance> {
        idxs.iter()
            .map(|&i| {
                let r = &self.records[i];
                QuadInstance {
                    record_id: r.record_id,
                    source_tokens: self.source_tokens(r).to_vec(),
                    source_pixels: self.materialize_source(r),
                    source_flags: r.source_flags(),
                    target_tokens: r.target_tokens.clone(),
                    target_pixels: self.materialize_target(r),
                }
            })
            .collect()
    }

    pub fn batches(&self, batch_size: usize, seed: u64) -> CrossPairBatches<'_> {
        assert!(batch_size > 0 && batch_size <= self.records.len());
        CrossPairBatches {
            dataset: self,
            order: Vec::new(),
            pos: 0,
            batch_size,
            rng: Rng::seed_from(seed),
        }
    }
}

fn validate_crosspair(rec: &CrossPairRecord, manifest: &Manifest) -> Result<()> {
    rec.source_flags().validate()?;
    let check_tokens = |tokens: &[u16]| -> Result<()> {
        for &t in tokens {
            if t as usize >= manifest.vocab_size {
                return Err(Error::Data(format!(
                    "record {}: token id {t} >= vocab_size {}",
                    rec.record_id, manifest.vocab_size
                )));
            }
        }
        Ok(())
    };
    check_tokens(&rec.target_tokens)?;
    if let Some(ts) = &rec.source_tokens {
        check_tokens(ts)?;
    }
    // Source and target must be views of the same concept.
    let target_concept = image_seed_concept(rec.target_image_seed);
    if target_concept as usize >= manifest.total_concepts() {
        return Err(Error::Data(format!(
            "record {}: target concept {target_concept} out of range",
            rec.record_id
        )));
    }
    let source_concept = match (rec.source_image_seed, &rec.source_tokens) {
        (Some(seed), _) => Some(image_seed_concept(seed)),
        (None, Some(tokens)) => dominant_concept(tokens, manifest.total_concepts()),
        (None, None) => None,
    };
    match source_concept {
        Some(c) if c == target_concept => Ok(()),
        Some(c) => Err(Error::Data(format!(
            "record {}: source concept {c} != target concept {target_concept}",
            rec.record_id
        ))),
        None => Err(Error::Data(format!(
            "record {}: cannot establish source concept",
            rec.record_id
        ))),
    }
}

/// Epoch iterator over cross-pair batches.
pub struct CrossPairBatches<'a> {
    dataset: &'a CrossPairDataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: Rng,
}

impl<'a> CrossPairBatches<'a> {
    pub fn per_epoch(&self) -> usize {
        self.dataset.len() / self.batch_size
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let n = self.dataset.len();
        let usable = self.per_epoch() * self.batch_size;
        if self.order.len() != n || self.pos + self.batch_size > usable {
            self.order = (0..n).collect();
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let batch = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        batch
    }
}
