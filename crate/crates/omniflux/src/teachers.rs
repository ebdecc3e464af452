//! Frozen supervision sources for the masked-image objectives: a feature
//! teacher (pooled-embedding analog) and a soft-cluster teacher. Both are
//! deterministic functions of a seed and always see the intact image, even
//! when the student sees the masked one.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Default feature width.
pub const FEAT_DIM: usize = 32;
/// Default cluster count.
pub const N_CLUSTERS: usize = 16;
/// Default cluster softmax temperature.
pub const CLUSTER_TEMPERATURE: f64 = 10.0;

/// Frozen random projection followed by tanh; never receives gradients.
#[derive(Debug, Clone)]
pub struct FeatureTeacher {
    projection: Vec<f32>,
    feat_dim: usize,
    pixel_count: usize,
    pub seed: u64,
}

impl FeatureTeacher {
    pub fn new(seed: u64, feat_dim: usize, pixel_count: usize) -> Self {
        let mut rng = Rng::seed_from(seed ^ 0xfea7_0000_0000_0001);
        let std = 1.0 / (pixel_count as f64).sqrt();
        let projection = (0..feat_dim * pixel_count)
            .map(|_| (rng.normal_f64() * std) as f32)
            .collect();
        FeatureTeacher {
            projection,
            feat_dim,
            pixel_count,
            seed,
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    /// `tanh(P x)` of the intact pixel grid.
    pub fn feature(&self, pixels: &[f32]) -> Vec<f32> {
        assert_eq!(pixels.len(), self.pixel_count, "pixel count mismatch");
        let mut out = vec![0.0f32; self.feat_dim];
        for (d, o) in out.iter_mut().enumerate() {
            let row = &self.projection[d * self.pixel_count..(d + 1) * self.pixel_count];
            let mut acc = 0.0f32;
            for (&p, &w) in pixels.iter().zip(row) {
                acc += p * w;
            }
            *o = acc.tanh();
        }
        out
    }
}

/// Frozen centroids with a softmax over negative squared distances.
#[derive(Debug, Clone)]
pub struct ClusterTeacher {
    centroids: Vec<f32>,
    n_clusters: usize,
    pixel_count: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl ClusterTeacher {
    /// Centroids are smooth random fields over the image grid (a coarse
    /// seeded lattice upsampled to full resolution) so that distances vary
    /// meaningfully across natural-looking inputs.
    pub fn new(seed: u64, n_clusters: usize, image_side: usize, temperature: f64) -> Self {
        assert!(temperature > 0.0);
        let pixel_count = image_side * image_side;
        let mut rng = Rng::seed_from(seed ^ 0xc105_7e00_0000_0002);
        let coarse = 4usize;
        let cell = image_side.div_ceil(coarse);
        let mut centroids = Vec::with_capacity(n_clusters * pixel_count);
        for _ in 0..n_clusters {
            let lattice: Vec<f32> = (0..coarse * coarse)
                .map(|_| 0.2 + 0.6 * rng.next_f32())
                .collect();
            for r in 0..image_side {
                for c in 0..image_side {
                    let lr = (r / cell).min(coarse - 1);
                    let lc = (c / cell).min(coarse - 1);
                    centroids.push(lattice[lr * coarse + lc]);
                }
            }
        }
        ClusterTeacher {
            centroids,
            n_clusters,
            pixel_count,
            temperature,
            seed,
        }
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn centroid(&self, k: usize) -> &[f32] {
        &self.centroids[k * self.pixel_count..(k + 1) * self.pixel_count]
    }

    /// `softmax_k(-||x - c_k||^2 / temperature)` of the intact pixel grid.
    pub fn distribution(&self, pixels: &[f32]) -> Vec<f32> {
        assert_eq!(pixels.len(), self.pixel_count, "pixel count mismatch");
        let mut logits = vec![0.0f64; self.n_clusters];
        for (k, l) in logits.iter_mut().enumerate() {
            let c = self.centroid(k);
            let mut d2 = 0.0f64;
            for (&p, &cv) in pixels.iter().zip(c) {
                let d = (p - cv) as f64;
                d2 += d * d;
            }
            *l = -d2 / self.temperature;
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
        let total: f64 = exps.iter().sum();
        for e in &mut exps {
            *e /= total;
        }
        exps.iter().map(|&e| e as f32).collect()
    }
}

/// One precomputed supervision record.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherCacheEntry {
    pub record_id: u64,
    pub feature: Vec<f32>,
    pub distribution: Vec<f32>,
}

/// Binary layout per record: id u64, feature `f32[feat_dim]`,
/// distribution `f32[n_clusters]`; all little-endian, no header.
pub fn encode_teacher_cache(entries: &[TeacherCacheEntry]) -> Vec<u8> {
    let mut out = Vec::new();
    for e in entries {
        out.extend_from_slice(&e.record_id.to_le_bytes());
        for v in &e.feature {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &e.distribution {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parse a teacher cache blob. Never panics on malformed input.
pub fn parse_teacher_cache(
    bytes: &[u8],
    feat_dim: usize,
    n_clusters: usize,
) -> Result<Vec<TeacherCacheEntry>> {
    let rec_size = 8 + 4 * (feat_dim + n_clusters);
    if rec_size == 8 {
        return Err(Error::Format("teacher cache: zero-width records".into()));
    }
    if bytes.len() % rec_size != 0 {
        return Err(Error::Format(format!(
            "teacher cache: {} bytes is not a multiple of record size {rec_size}",
            bytes.len()
        )));
    }
    let mut entries = Vec::with_capacity(bytes.len() / rec_size);
    for chunk in bytes.chunks_exact(rec_size) {
        let record_id = u64::from_le_bytes(chunk[0..8].try_into().expect("8-byte chunk"));
        let mut off = 8;
        let read_f32s = |n: usize, off: &mut usize| {
            let mut vs = Vec::with_capacity(n);
            for _ in 0..n {
                let v = f32::from_le_bytes(chunk[*off..*off + 4].try_into().expect("4 bytes"));
                vs.push(v);
                *off += 4;
            }
            vs
        };
        let feature = read_f32s(feat_dim, &mut off);
        let distribution = read_f32s(n_clusters, &mut off);
        entries.push(TeacherCacheEntry {
            record_id,
            feature,
            distribution,
        });
    }
    Ok(entries)
}

pub fn write_teacher_cache(path: &Path, entries: &[TeacherCacheEntry]) -> Result<()> {
    let bytes = encode_teacher_cache(entries);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_teacher_cache(
    path: &Path,
    feat_dim: usize,
    n_clusters: usize,
) -> Result<Vec<TeacherCacheEntry>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_teacher_cache(&bytes, feat_dim, n_clusters)
}
