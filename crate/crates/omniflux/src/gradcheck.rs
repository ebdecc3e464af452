//! End-to-end finite-difference verification of every training loss.
//!
//! Runs at f64 on a reduced model so the full sweep (every parameter entry
//! of every loss) finishes in seconds; batch sizes are the contract sizes
//! (4 pairs for the image-text losses, 2 quadruples for the omni loss).

use crate::data::ModalityFlags;
use crate::error::{Error, Result};
use crate::masking::{self, MaskPlan};
use crate::model::{
    encode_image, encode_text, forward_pair, fuse, patches_leaf, taped_inv_temperature,
    ModelConfig, ModelState, TapedModel,
};
use crate::objectives::{
    image_text_step_loss, itc_loss, itm_hard_negatives, itm_loss, mim_fr_loss, mim_kl_loss,
    mlm_loss, omni_step_loss, MlmItem, TaskWeights,
};
use crate::rng::Rng;
use crate::teachers::{ClusterTeacher, FeatureTeacher};
use crate::tensor::check::CheckParam;
use crate::tensor::{grad_check, Tape, TensorId};

/// Pass threshold on the max relative error.
pub const GRAD_TOL: f64 = 1e-3;

/// Central-difference step.
pub const GRAD_EPS: f64 = 1e-4;

/// Reduced model used for verification runs.
pub fn verification_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        hidden_dim: 8,
        num_heads: 2,
        total_layers: 2,
        text_layers_k: 1,
        image_patch_size: 8,
        image_side: 16,
        proj_dim: 4,
        max_text_len: 8,
        mim_feat_dim: 4,
        mim_clusters: 4,
    }
}

pub const LOSS_NAMES: [&str; 6] = ["mlm", "mim-fr", "mim-kl", "itc", "itm", "omni"];

#[derive(Debug, Clone)]
pub struct LossCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

impl LossCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOL
    }
}

fn pair_batch(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<(Vec<u16>, Vec<f64>)> {
    let mut rng = Rng::seed_from(seed);
    (0..n)
        .map(|_| {
            let tokens: Vec<u16> = (0..4 + rng.below(4))
                .map(|_| rng.below(cfg.vocab_size) as u16)
                .collect();
            let pixels: Vec<f64> = (0..cfg.pixel_count()).map(|_| rng.next_f64()).collect();
            (tokens, pixels)
        })
        .collect()
}

fn check_over_model<B>(cfg: ModelConfig, build: B) -> f64
where
    B: Fn(&mut Tape<f64>, &TapedModel) -> TensorId,
{
    let state = ModelState::<f64>::init(cfg, 2024).expect("verification config is valid");
    let params: Vec<CheckParam> = state
        .params()
        .iter()
        .map(|p| CheckParam::new(p.data.clone(), p.shape.clone()))
        .collect();
    let k = state.k_split();
    grad_check(
        |tape, ids| {
            let tm = TapedModel::from_parts(cfg, k, ids);
            build(tape, &tm)
        },
        &params,
        GRAD_EPS,
    )
}

/// Verify one loss by name; see [`LOSS_NAMES`].
pub fn check_loss(name: &str) -> Result<LossCheck> {
    let cfg = verification_config();
    let err = match name {
        "mlm" => check_over_model(cfg, move |tape, tm| {
            let batch = pair_batch(&cfg, 4, 101);
            let mut rng = Rng::seed_from(7);
            let corrupted: Vec<(Vec<u16>, MaskPlan)> = batch
                .iter()
                .map(|(tokens, _)| masking::mask_text(tokens, masking::TEXT_MASK_RATIO, &mut rng))
                .collect();
            let mut fused_ids = Vec::new();
            for ((_, pixels), (bad_tokens, _)) in batch.iter().zip(&corrupted) {
                let text = encode_text(tape, tm, bad_tokens);
                let patches = patches_leaf(tape, &cfg, pixels, false);
                let vis = encode_image(tape, tm, patches);
                fused_ids.push(fuse(tape, tm, text, vis));
            }
            let items: Vec<MlmItem<'_>> = batch
                .iter()
                .zip(&corrupted)
                .zip(&fused_ids)
                .map(|(((tokens, _), (_, plan)), &fused)| MlmItem {
                    fused_seq: fused,
                    plan,
                    targets: tokens,
                })
                .collect();
            mlm_loss(tape, tm.token_embedding, &items)
        }),
        "mim-fr" | "mim-kl" => {
            let fr = name == "mim-fr";
            let ft = FeatureTeacher::new(31, cfg.mim_feat_dim, cfg.pixel_count());
            let ct = ClusterTeacher::new(31, cfg.mim_clusters, cfg.image_side, 10.0);
            check_over_model(cfg, move |tape, tm| {
                let batch = pair_batch(&cfg, 4, 103);
                let mut rng = Rng::seed_from(9);
                let mut rows = Vec::new();
                let mut feats = Vec::new();
                let mut dists = Vec::new();
                for (tokens, pixels) in &batch {
                    let px32: Vec<f32> = pixels.iter().map(|&v| v as f32).collect();
                    let (masked, _) =
                        masking::mask_image(&px32, &cfg, masking::IMAGE_MASK_RATIO, &mut rng);
                    let masked64: Vec<f64> = masked.iter().map(|&v| v as f64).collect();
                    let text = encode_text(tape, tm, tokens);
                    let patches = patches_leaf(tape, &cfg, &masked64, false);
                    let vis = encode_image(tape, tm, patches);
                    let fused = fuse(tape, tm, text, vis);
                    rows.push(tape.gather_rows(fused, &[tokens.len() + 1]));
                    feats.push(ft.feature(&px32));
                    dists.push(ct.distribution(&px32));
                }
                if fr {
                    mim_fr_loss(tape, tm.mim_fr_w, tm.mim_fr_b, &rows, &feats)
                } else {
                    mim_kl_loss(tape, tm.mim_kl_w, tm.mim_kl_b, &rows, &dists)
                }
            })
        }
        "itc" => check_over_model(cfg, move |tape, tm| {
            let batch = pair_batch(&cfg, 4, 107);
            let mut f_rows = Vec::new();
            let mut g_rows = Vec::new();
            for (tokens, pixels) in &batch {
                let patches = patches_leaf(tape, &cfg, pixels, false);
                let out = forward_pair(tape, tm, tokens, patches);
                f_rows.push(out.f_w);
                g_rows.push(out.g_v);
            }
            let inv_tau = taped_inv_temperature(tape, tm);
            itc_loss(tape, inv_tau, &f_rows, &g_rows).0
        }),
        "itm" => check_over_model(cfg, move |tape, tm| {
            let batch = pair_batch(&cfg, 4, 109);
            let mut rng = Rng::seed_from(11);
            let outputs: Vec<_> = batch
                .iter()
                .map(|(tokens, pixels)| {
                    let patches = patches_leaf(tape, &cfg, pixels, false);
                    forward_pair(tape, tm, tokens, patches)
                })
                .collect();
            let f_rows: Vec<TensorId> = outputs.iter().map(|o| o.f_w).collect();
            let g_rows: Vec<TensorId> = outputs.iter().map(|o| o.g_v).collect();
            let inv_tau = taped_inv_temperature(tape, tm);
            let (_, sim) = itc_loss(tape, inv_tau, &f_rows, &g_rows);
            let (neg_img, neg_txt) = itm_hard_negatives(&sim, 0.07, &mut rng).expect("n >= 2");
            let mut rows: Vec<TensorId> = outputs.iter().map(|o| o.w_cls_fused).collect();
            let mut labels = vec![1.0; batch.len()];
            for (i, &j) in neg_img.iter().enumerate() {
                let fused = fuse(tape, tm, outputs[i].textual_seq, outputs[j].visual_seq);
                rows.push(tape.gather_rows(fused, &[0]));
                labels.push(0.0);
            }
            for (j, &i) in neg_txt.iter().enumerate() {
                let fused = fuse(tape, tm, outputs[i].textual_seq, outputs[j].visual_seq);
                rows.push(tape.gather_rows(fused, &[0]));
                labels.push(0.0);
            }
            itm_loss(tape, tm.itm_w, tm.itm_b, &rows, &labels)
        }),
        "omni" => check_over_model(cfg, move |tape, tm| {
            let mut rng = Rng::seed_from(13);
            let flags = [
                ModalityFlags {
                    has_text: true,
                    has_image: true,
                },
                ModalityFlags {
                    has_text: true,
                    has_image: false,
                },
            ];
            let quads: Vec<crate::data::QuadInstance> = (0..2)
                .map(|i| {
                    let fl: ModalityFlags = flags[i];
                    let tokens = |rng: &mut Rng| -> Vec<u16> {
                        (0..4 + rng.below(3))
                            .map(|_| rng.below(cfg.vocab_size) as u16)
                            .collect()
                    };
                    let pixels = |rng: &mut Rng| -> Vec<f32> {
                        (0..cfg.pixel_count()).map(|_| rng.next_f32()).collect()
                    };
                    crate::data::QuadInstance {
                        record_id: i as u64,
                        source_tokens: if fl.has_text {
                            tokens(&mut rng)
                        } else {
                            vec![]
                        },
                        source_pixels: if fl.has_image {
                            pixels(&mut rng)
                        } else {
                            vec![0.5; cfg.pixel_count()]
                        },
                        source_flags: fl,
                        target_tokens: tokens(&mut rng),
                        target_pixels: pixels(&mut rng),
                    }
                })
                .collect();
            omni_step_loss(tape, tm, &quads, &TaskWeights::default())
                .expect("valid quads")
                .total
        }),
        // the combined 5-task objective, checked as one backward
        "image-text" => {
            let ft = FeatureTeacher::new(37, cfg.mim_feat_dim, cfg.pixel_count());
            let ct = ClusterTeacher::new(37, cfg.mim_clusters, cfg.image_side, 10.0);
            check_over_model(cfg, move |tape, tm| {
                let batch = pair_batch(&cfg, 4, 113);
                let instances: Vec<crate::data::PairInstance> = batch
                    .iter()
                    .enumerate()
                    .map(|(i, (tokens, pixels))| crate::data::PairInstance {
                        record_id: i as u64,
                        concept_id: 0,
                        tokens: tokens.clone(),
                        pixels: pixels.iter().map(|&v| v as f32).collect(),
                    })
                    .collect();
                let mut rng = Rng::seed_from(15);
                image_text_step_loss(
                    tape,
                    tm,
                    &instances,
                    &ft,
                    &ct,
                    &TaskWeights::default(),
                    0.07,
                    &mut rng,
                )
                .expect("valid batch")
                .total
            })
        }
        other => {
            return Err(Error::Config(format!(
                "unknown loss {other:?}; expected one of {LOSS_NAMES:?} or image-text"
            )))
        }
    };
    let name_static = LOSS_NAMES
        .iter()
        .copied()
        .chain(["image-text"])
        .find(|n| *n == name)
        .expect("name resolved above");
    Ok(LossCheck {
        name: name_static,
        max_rel_err: err,
    })
}

/// Verify all six losses.
pub fn check_all() -> Result<Vec<LossCheck>> {
    LOSS_NAMES.iter().map(|n| check_loss(n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_passes_the_sweep() {
        for check in check_all().unwrap() {
            assert!(
                check.passed(),
                "{}: max rel err {}",
                check.name,
                check.max_rel_err
            );
        }
    }

    #[test]
    fn unknown_loss_is_a_config_error() {
        assert!(check_loss("nope").is_err());
    }
}
