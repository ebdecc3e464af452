use super::*;
use crate::data::{generate_corpus, GenConfig};
use crate::model::ModelConfig;
use tempfile::tempdir;

fn small_model() -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        num_heads: 2,
        total_layers: 2,
        text_layers_k: 1,
        proj_dim: 8,
        mim_feat_dim: 8,
        mim_clusters: 4,
        ..ModelConfig::default()
    }
}

fn small_corpus(dir: &std::path::Path, seed: u64) -> GenConfig {
    let cfg = GenConfig {
        n_pairs: 64,
        n_crosspairs: 48,
        downstream_train: 40,
        downstream_eval: 40,
        ..GenConfig::default()
    };
    generate_corpus(dir, &cfg, seed).unwrap();
    cfg
}

fn unit_rows(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = Rng::seed_from(seed);
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal_f64()).collect();
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|&x| (x / norm) as f32).collect()
        })
        .collect()
}

// ── recall ──────────────────────────────────────────────────────────

#[test]
fn self_retrieval_is_perfect() {
    let rows = unit_rows(20, 8, 3);
    let gt: Vec<usize> = (0..20).collect();
    assert_eq!(recall_at_k(&rows, &rows, &gt, 1), 1.0);
}

#[test]
fn forced_rank_two_fails_at_one_passes_at_five() {
    // candidate 0 beats the true candidate 1 for the single query
    let queries = vec![vec![1.0f32, 0.0]];
    let candidates = vec![
        vec![1.0f32, 0.0],
        vec![0.9539392f32, 0.3],
        vec![-1.0f32, 0.0],
        vec![0.0f32, -1.0],
        vec![0.0f32, 1.0],
    ];
    let gt = vec![1usize];
    assert_eq!(recall_at_k(&queries, &candidates, &gt, 1), 0.0);
    assert_eq!(recall_at_k(&queries, &candidates, &gt, 5), 1.0);
}

#[test]
fn ties_break_toward_lower_candidate_index() {
    let queries = vec![vec![1.0f32, 0.0]];
    let dup = vec![1.0f32, 0.0];
    // candidates 0 and 1 identical; truth at 1 loses the tie at k=1
    let candidates = vec![dup.clone(), dup, vec![0.0, 1.0]];
    assert_eq!(recall_at_k(&queries, &candidates, &[1], 1), 0.0);
    assert_eq!(recall_at_k(&queries, &candidates, &[0], 1), 1.0);
    assert_eq!(recall_at_k(&queries, &candidates, &[1], 2), 1.0);
}

/// Independent full-sort oracle: sort all candidates by (score desc, index
/// asc) and test top-k membership.
fn recall_oracle(queries: &[Vec<f32>], candidates: &[Vec<f32>], gt: &[usize], k: usize) -> f64 {
    let mut hits = 0usize;
    for (q, &truth) in queries.iter().zip(gt) {
        let mut scored: Vec<(usize, f64)> = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (i, q.iter().zip(c).map(|(&a, &b)| a as f64 * b as f64).sum()))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        if scored[..k].iter().any(|&(i, _)| i == truth) {
            hits += 1;
        }
    }
    hits as f64 / queries.len() as f64
}

#[test]
fn recall_matches_full_sort_oracle_exactly() {
    let mut rng = Rng::seed_from(29);
    for trial in 0..100 {
        let queries = unit_rows(7, 6, 1000 + trial);
        let candidates = unit_rows(30, 6, 2000 + trial);
        let gt: Vec<usize> = (0..7).map(|_| rng.below(30)).collect();
        for k in [1usize, 5, 10] {
            let fast = recall_at_k(&queries, &candidates, &gt, k);
            let slow = recall_oracle(&queries, &candidates, &gt, k);
            assert_eq!(fast, slow, "trial {trial}, k {k}");
        }
    }
}

#[test]
fn recall_is_monotone_in_k() {
    let queries = unit_rows(12, 8, 31);
    let candidates = unit_rows(25, 8, 37);
    let gt: Vec<usize> = (0..12).map(|i| (i * 2) % 25).collect();
    let mut prev = 0.0;
    for k in 1..=25 {
        let r = recall_at_k(&queries, &candidates, &gt, k);
        assert!(r >= prev, "R@{k} = {r} < R@{} = {prev}", k - 1);
        prev = r;
    }
    assert_eq!(prev, 1.0);
}

#[test]
fn ranking_is_invariant_to_positive_rescaling() {
    let queries = unit_rows(10, 8, 41);
    let candidates = unit_rows(40, 8, 43);
    let gt: Vec<usize> = (0..10).map(|i| i * 3).collect();
    let scaled: Vec<Vec<f32>> = queries
        .iter()
        .map(|q| q.iter().map(|&v| v * 7.25).collect())
        .collect();
    for k in [1usize, 3, 10] {
        assert_eq!(
            recall_at_k(&queries, &candidates, &gt, k),
            recall_at_k(&scaled, &candidates, &gt, k)
        );
    }
}

#[test]
#[should_panic(expected = "out of range")]
fn recall_rejects_k_beyond_candidates() {
    let rows = unit_rows(3, 4, 5);
    recall_at_k(&rows, &rows, &[0, 1, 2], 4);
}

// ── classification ──────────────────────────────────────────────────

#[test]
fn untrained_head_sits_near_chance() {
    let dir = tempdir().unwrap();
    // balanced eval split: 10 classes, downstream_eval = 40 -> 4 per class
    small_corpus(dir.path(), 51);
    let eval = PairDataset::load(dir.path(), crate::data::CC_EVAL).unwrap();
    let state = ModelState::<f32>::init(small_model(), 3).unwrap();
    let head = ClassifierHead::init(small_model().hidden_dim, (0..10).collect(), 7);
    let acc = classifier_accuracy(&state, &head, &eval).unwrap();
    assert!(
        (0.0..=0.30).contains(&acc),
        "chance-level accuracy expected, got {acc}"
    );
}

#[test]
fn out_of_set_label_is_a_data_error() {
    let dir = tempdir().unwrap();
    small_corpus(dir.path(), 53);
    // train on the MPC split (classes 10..16) but evaluate on CC (0..10)
    let train = PairDataset::load(dir.path(), crate::data::MPC_TRAIN).unwrap();
    let eval = PairDataset::load(dir.path(), crate::data::CC_EVAL).unwrap();
    let state = ModelState::<f32>::init(small_model(), 3).unwrap();
    let err = finetune_classifier(
        state,
        &train,
        &eval,
        &FinetuneConfig {
            epochs: 1,
            ..FinetuneConfig::default()
        },
    )
    .unwrap_err();
    assert!(err.to_string().contains("class set"), "{err}");
}

#[test]
fn classifier_overfits_a_small_split() {
    let dir = tempdir().unwrap();
    small_corpus(dir.path(), 55);
    let train = PairDataset::load(dir.path(), crate::data::CC_TRAIN).unwrap();
    let state = ModelState::<f32>::init(small_model(), 4).unwrap();
    let cfg = FinetuneConfig {
        learning_rate: 1e-3,
        epochs: 50,
        batch_size: 8,
        seed: 5,
    };
    // evaluate on the training split itself: overfit sanity
    let (train_acc, _, _) = finetune_classifier(state, &train, &train, &cfg).unwrap();
    assert!(train_acc >= 0.95, "train accuracy {train_acc}");
}

#[test]
fn classifier_finetune_is_deterministic() {
    let dir = tempdir().unwrap();
    small_corpus(dir.path(), 57);
    let train = PairDataset::load(dir.path(), crate::data::CC_TRAIN).unwrap();
    let eval = PairDataset::load(dir.path(), crate::data::CC_EVAL).unwrap();
    let cfg = FinetuneConfig {
        epochs: 2,
        ..FinetuneConfig::default()
    };
    let run = || {
        let state = ModelState::<f32>::init(small_model(), 4).unwrap();
        let (acc, state, head) = finetune_classifier(state, &train, &eval, &cfg).unwrap();
        (acc, state.params()[0].data.clone(), head.w.data)
    };
    let (a1, p1, h1) = run();
    let (a2, p2, h2) = run();
    assert_eq!(a1, a2);
    assert_eq!(p1, p2);
    assert_eq!(h1, h2);
}

// ── retrieval fine-tuning ───────────────────────────────────────────

#[test]
fn contrastive_finetune_decreases_loss_on_fixed_batch() {
    let dir = tempdir().unwrap();
    small_corpus(dir.path(), 59);
    let train = PairDataset::load(dir.path(), crate::data::T2I_TRAIN).unwrap();
    let mut state = ModelState::<f32>::init(small_model(), 6).unwrap();
    let instances = train.instances(&(0..16).collect::<Vec<_>>());
    let eval_loss = |state: &ModelState<f32>| -> f64 {
        let mut tape = Tape::<f32>::new();
        let tm = state.register(&mut tape);
        let mut f_rows = Vec::new();
        let mut g_rows = Vec::new();
        for ex in &instances {
            f_rows.push(embed_text_query(&mut tape, &tm, &ex.tokens));
            let patches = patches_leaf(&mut tape, &state.config, &ex.pixels, false);
            g_rows.push(embed_image_query(&mut tape, &tm, patches));
        }
        let inv_tau = taped_inv_temperature(&mut tape, &tm);
        let (loss, _) = itc_loss(&mut tape, inv_tau, &f_rows, &g_rows);
        tape.value(loss)
    };
    let before = eval_loss(&state);
    state = finetune_retrieval_pairs(
        state,
        &train,
        &FinetuneConfig {
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 16,
            seed: 3,
        },
    )
    .unwrap();
    let after = eval_loss(&state);
    assert!(after < before, "contrastive loss {before} -> {after}");
}

#[test]
fn text_queries_ignore_the_fusion_stack() {
    let dir = tempdir().unwrap();
    small_corpus(dir.path(), 61);
    let q2p = CrossPairDataset::load(dir.path(), crate::data::Q2P_EVAL).unwrap();
    let model_cfg = small_model();
    let mut state = ModelState::<f32>::init(model_cfg, 8).unwrap();
    let (q_before, _, _) = embed_crosspairs(&state, &q2p, RetrievalTask::QueryToProduct).unwrap();
    // wreck every fusion block (blocks k..total); text queries only touch
    // blocks [0, k)
    let k = state.k_split();
    for blk in &mut state.blocks[k..] {
        blk.wq.data.iter_mut().for_each(|v| *v += 5.0);
        blk.w_up.data.iter_mut().for_each(|v| *v -= 3.0);
    }
    let (q_after, h_after, _) =
        embed_crosspairs(&state, &q2p, RetrievalTask::QueryToProduct).unwrap();
    assert_eq!(q_before, q_after, "query path touched fusion parameters");
    // sanity: the targets did change
    assert_ne!(
        h_after[0],
        embed_crosspairs(
            &ModelState::<f32>::init(model_cfg, 8).unwrap(),
            &q2p,
            RetrievalTask::QueryToProduct
        )
        .unwrap()
        .1[0]
    );
}

#[test]
fn image_queries_ignore_every_transformer_block() {
    let dir = tempdir().unwrap();
    small_corpus(dir.path(), 63);
    let i2p = CrossPairDataset::load(dir.path(), crate::data::I2P_EVAL).unwrap();
    let mut state = ModelState::<f32>::init(small_model(), 9).unwrap();
    let (q_before, _, _) = embed_crosspairs(&state, &i2p, RetrievalTask::ImageToProduct).unwrap();
    for blk in &mut state.blocks {
        blk.wq.data.iter_mut().for_each(|v| *v += 2.0);
    }
    let (q_after, _, _) = embed_crosspairs(&state, &i2p, RetrievalTask::ImageToProduct).unwrap();
    assert_eq!(q_before, q_after);
}

// ── the suite ───────────────────────────────────────────────────────

#[test]
fn perfect_metrics_average_to_one() {
    let report = EvalReport::compute([1.0; 7], 1, "x");
    assert_eq!(report.meta_avg, 1.0);
}

#[test]
fn report_json_has_exactly_the_contract_keys() {
    let report = EvalReport::compute([0.5, 0.25, 0.1, 0.2, 0.3, 0.4, 0.6], 9, "ck");
    let json = report.to_json();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    let obj = v.as_object().unwrap();
    let mut keys: Vec<&str> = obj.keys().map(|k| k.as_str()).collect();
    keys.sort_unstable();
    assert_eq!(
        keys,
        [
            "cc",
            "checkpoint",
            "i2p",
            "i2pi",
            "i2t",
            "meta_avg",
            "mpc",
            "q2p",
            "seed",
            "t2i"
        ]
    );
    let mean = (0.5 + 0.25 + 0.1 + 0.2 + 0.3 + 0.4 + 0.6) / 7.0;
    assert!((v["meta_avg"].as_f64().unwrap() - mean).abs() < 1e-9);
}

#[test]
fn suite_runs_end_to_end_and_is_deterministic() {
    let dir = tempdir().unwrap();
    small_corpus(dir.path(), 65);
    let model_cfg = small_model();
    let ft = FinetuneConfig {
        epochs: 1,
        batch_size: 8,
        ..FinetuneConfig::default()
    };
    let build = || -> EvalReport {
        let cc_train = PairDataset::load(dir.path(), crate::data::CC_TRAIN).unwrap();
        let cc_eval = PairDataset::load(dir.path(), crate::data::CC_EVAL).unwrap();
        let mpc_train = PairDataset::load(dir.path(), crate::data::MPC_TRAIN).unwrap();
        let mpc_eval = PairDataset::load(dir.path(), crate::data::MPC_EVAL).unwrap();
        let t2i_train = PairDataset::load(dir.path(), crate::data::T2I_TRAIN).unwrap();
        let q2p_train = CrossPairDataset::load(dir.path(), crate::data::Q2P_TRAIN).unwrap();
        let i2p_train = CrossPairDataset::load(dir.path(), crate::data::I2P_TRAIN).unwrap();
        let base = || ModelState::<f32>::init(model_cfg, 10).unwrap();
        let (_, cc_state, cc_head) = finetune_classifier(base(), &cc_train, &cc_eval, &ft).unwrap();
        let (_, mpc_state, mpc_head) =
            finetune_classifier(base(), &mpc_train, &mpc_eval, &ft).unwrap();
        let states = SuiteStates {
            cc: (cc_state, cc_head),
            mpc: (mpc_state, mpc_head),
            t2i: finetune_retrieval_pairs(base(), &t2i_train, &ft).unwrap(),
            q2p: finetune_retrieval_crosspairs(
                base(),
                RetrievalTask::QueryToProduct,
                &q2p_train,
                &ft,
            )
            .unwrap(),
            i2p: finetune_retrieval_crosspairs(
                base(),
                RetrievalTask::ImageToProduct,
                &i2p_train,
                &ft,
            )
            .unwrap(),
        };
        evaluate_suite(&states, dir.path(), 10, "test").unwrap()
    };
    let r1 = build();
    let r2 = build();
    assert_eq!(r1, r2, "suite must be deterministic under a fixed seed");
    for m in r1.metrics() {
        assert!((0.0..=1.0).contains(&m));
    }
    assert!((r1.meta_avg - r1.metrics().iter().sum::<f64>() / 7.0).abs() < 1e-9);
}

#[test]
fn embedding_export_shape_and_determinism() {
    let dir = tempdir().unwrap();
    small_corpus(dir.path(), 67);
    let ds = PairDataset::load(dir.path(), crate::data::CC_EVAL).unwrap();
    let model_cfg = small_model();
    let state = ModelState::<f32>::init(model_cfg, 11).unwrap();
    let out1 = dir.path().join("emb1.tsv");
    let out2 = dir.path().join("emb2.tsv");
    export_embeddings(&state, &ds, &out1).unwrap();
    export_embeddings(&state, &ds, &out2).unwrap();
    assert_eq!(std::fs::read(&out1).unwrap(), std::fs::read(&out2).unwrap());
    let text = std::fs::read_to_string(&out1).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), ds.len());
    for line in &lines {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 1 + 3 * model_cfg.proj_dim);
        for row_start in [1, 1 + model_cfg.proj_dim, 1 + 2 * model_cfg.proj_dim] {
            let norm: f64 = cols[row_start..row_start + model_cfg.proj_dim]
                .iter()
                .map(|c| c.parse::<f64>().unwrap().powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-5, "norm {norm}");
        }
    }
}
