//! Mask-index sampling and input corruption for the masked-prediction tasks.
//!
//! Indices are in token space / patch space (position 0 of the encoded
//! sequence is the `[CLS]` slot and is never maskable because it is not part
//! of the input being corrupted).

use crate::model::ModelConfig;
use crate::rng::Rng;

/// Token id reserved for `[MASK]`.
pub const MASK_TOKEN: u16 = 0;

/// Grey value substituted into masked patches, in [0, 1] pixel space.
pub const GREY_PIXEL: f32 = 0.5;

/// Default text masking ratio.
pub const TEXT_MASK_RATIO: f64 = 0.15;

/// Default image masking ratio (patches).
pub const IMAGE_MASK_RATIO: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskDomain {
    Text,
    Image,
}

/// Which positions were corrupted, in ascending order.
#[derive(Debug, Clone)]
pub struct MaskPlan {
    pub indices: Vec<usize>,
    pub ratio: f64,
    pub domain: MaskDomain,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Number of positions to mask: `round(ratio * len)`, at least 1 whenever
/// `ratio > 0` and `len > 0`.
pub fn mask_count(ratio: f64, len: usize) -> usize {
    assert!(
        (0.0..=1.0).contains(&ratio),
        "mask ratio {ratio} out of [0,1]"
    );
    if ratio <= 0.0 || len == 0 {
        return 0;
    }
    ((ratio * len as f64).round() as usize).clamp(1, len)
}

/// Replace sampled token positions with `[MASK]`; originals stay in `tokens`.
pub fn mask_text(tokens: &[u16], ratio: f64, rng: &mut Rng) -> (Vec<u16>, MaskPlan) {
    let count = mask_count(ratio, tokens.len());
    let indices = rng.sample_distinct(tokens.len(), count);
    let mut corrupted = tokens.to_vec();
    for &i in &indices {
        corrupted[i] = MASK_TOKEN;
    }
    (
        corrupted,
        MaskPlan {
            indices,
            ratio,
            domain: MaskDomain::Text,
        },
    )
}

/// Grey out sampled patches of a flat `side x side` pixel grid. The plan
/// indexes patches, not pixels.
pub fn mask_image(
    pixels: &[f32],
    cfg: &ModelConfig,
    ratio: f64,
    rng: &mut Rng,
) -> (Vec<f32>, MaskPlan) {
    assert_eq!(pixels.len(), cfg.pixel_count(), "pixel grid size mismatch");
    let patches = cfg.num_patches();
    let count = mask_count(ratio, patches);
    let indices = rng.sample_distinct(patches, count);
    let mut corrupted = pixels.to_vec();
    let ps = cfg.image_patch_size;
    let per_side = cfg.image_side / ps;
    for &p in &indices {
        let pr = p / per_side;
        let pc = p % per_side;
        for r in 0..ps {
            let base = (pr * ps + r) * cfg.image_side + pc * ps;
            for v in &mut corrupted[base..base + ps] {
                *v = GREY_PIXEL;
            }
        }
    }
    (
        corrupted,
        MaskPlan {
            indices,
            ratio,
            domain: MaskDomain::Image,
        },
    )
}
