//! End-to-end tests of the binary: exit codes, determinism, resume.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_omniflux"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen_args<'a>(out: &'a str, seed: &'a str) -> Vec<&'a str> {
    vec![
        "gen-data",
        "--out",
        out,
        "--seed",
        seed,
        "--set",
        "gen.n_pairs=80",
        "--set",
        "gen.n_crosspairs=48",
        "--set",
        "gen.downstream_train=24",
        "--set",
        "gen.downstream_eval=24",
    ]
}

fn dir_digest(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let out_a = run(&gen_args(a.to_str().unwrap(), "5"));
    let out_b = run(&gen_args(b.to_str().unwrap(), "5"));
    assert_code(&out_a, 0);
    assert_code(&out_b, 0);
    assert_eq!(out_a.stdout, out_b.stdout, "manifest output differs");
    assert_eq!(dir_digest(&a), dir_digest(&b));
}

#[test]
fn gen_data_requires_out() {
    let out = run(&["gen-data", "--seed", "3"]);
    assert_code(&out, 2);
}

#[test]
fn unknown_config_key_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen-data",
        "--out",
        tmp.path().join("x").to_str().unwrap(),
        "--set",
        "gen.pairs=10",
    ]);
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));
}

#[test]
fn generated_corpus_passes_loader_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("c");
    assert_code(&run(&gen_args(dir.to_str().unwrap(), "9")), 0);
    let pairs = omniflux::data::PairDataset::load(&dir, omniflux::data::PAIRS_FILE).unwrap();
    assert_eq!(pairs.len(), 80);
    let crosses =
        omniflux::data::CrossPairDataset::load(&dir, omniflux::data::CROSSPAIRS_FILE).unwrap();
    assert_eq!(crosses.len(), 48);
}

#[test]
fn stage_two_without_resume_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("c");
    assert_code(&run(&gen_args(dir.to_str().unwrap(), "11")), 0);
    let out = run(&[
        "pretrain",
        "--data",
        dir.to_str().unwrap(),
        "--stage",
        "2",
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage-1 checkpoint"));
}

#[test]
fn unknown_finetune_task_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "finetune",
        "--task",
        "vqa",
        "--checkpoint",
        "nope.ckpt",
        "--data",
        tmp.path().to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown task"));
}

#[test]
fn eval_without_states_exits_five_and_lists_missing() {
    let tmp = tempfile::tempdir().unwrap();
    let states = tmp.path().join("states");
    std::fs::create_dir_all(&states).unwrap();
    let out = run(&[
        "eval",
        "--suite",
        "--states",
        states.to_str().unwrap(),
        "--data",
        tmp.path().to_str().unwrap(),
    ]);
    assert_code(&out, 5);
    let err = String::from_utf8_lossy(&out.stderr);
    for task in ["cc", "mpc", "t2i", "i2t", "q2p", "i2p", "i2pi"] {
        assert!(err.contains(task), "missing-task list lacks {task}: {err}");
    }
}

/// Small but complete binary-level pipeline: pretrain, interrupt-resume
/// equivalence, embed row counts.
#[test]
fn pipeline_resume_and_embed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("c");
    assert_code(&run(&gen_args(dir.to_str().unwrap(), "13")), 0);
    let small = [
        "--set",
        "model.hidden_dim=16",
        "--set",
        "model.total_layers=2",
        "--set",
        "model.text_layers_k=1",
        "--set",
        "model.proj_dim=8",
        "--set",
        "model.mim_feat_dim=8",
        "--set",
        "model.mim_clusters=4",
        "--set",
        "train.batch_size=8",
    ];

    // uninterrupted 6-step run
    let full_out = tmp.path().join("full");
    let mut args = vec![
        "pretrain",
        "--data",
        dir.to_str().unwrap(),
        "--stage",
        "1",
        "--out",
        full_out.to_str().unwrap(),
        "--seed",
        "21",
        "--set",
        "train.total_steps=6",
    ];
    args.extend_from_slice(&small);
    assert_code(&run(&args), 0);

    // 3 steps, then resume to 6
    let part_out = tmp.path().join("part");
    let mut args = vec![
        "pretrain",
        "--data",
        dir.to_str().unwrap(),
        "--stage",
        "1",
        "--out",
        part_out.to_str().unwrap(),
        "--seed",
        "21",
        "--set",
        "train.total_steps=3",
    ];
    args.extend_from_slice(&small);
    assert_code(&run(&args), 0);
    let part_ckpt = part_out.join("checkpoint_stage1.ckpt");
    let resumed_ckpt_arg = part_ckpt.to_str().unwrap().to_string();
    let mut args = vec![
        "pretrain",
        "--data",
        dir.to_str().unwrap(),
        "--stage",
        "1",
        "--resume",
        &resumed_ckpt_arg,
        "--out",
        part_out.to_str().unwrap(),
        "--seed",
        "21",
        "--set",
        "train.total_steps=6",
    ];
    args.extend_from_slice(&small);
    assert_code(&run(&args), 0);

    // interrupted + resumed matches the uninterrupted run bit for bit
    let full_ckpt = std::fs::read(full_out.join("checkpoint_stage1.ckpt")).unwrap();
    let part_ckpt_bytes = std::fs::read(&part_ckpt).unwrap();
    assert_eq!(full_ckpt, part_ckpt_bytes);
    assert_eq!(
        std::fs::read(full_out.join("metrics_stage1.jsonl")).unwrap(),
        std::fs::read(part_out.join("metrics_stage1.jsonl")).unwrap()
    );

    // embeddings: one row per eval record
    let emb = tmp.path().join("emb.tsv");
    let out = run(&[
        "embed",
        "--checkpoint",
        full_out.join("checkpoint_stage1.ckpt").to_str().unwrap(),
        "--data",
        dir.to_str().unwrap(),
        "--out",
        emb.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let rows = std::fs::read_to_string(&emb).unwrap().lines().count();
    assert_eq!(rows, 24);
}

#[test]
fn env_var_seed_is_the_last_resort_default() {
    let tmp = tempfile::tempdir().unwrap();
    let via_env = tmp.path().join("env");
    let via_flag = tmp.path().join("flag");
    let out = bin()
        .args(gen_args(via_env.to_str().unwrap(), "99"))
        .output()
        .unwrap();
    assert_code(&out, 0);
    // same corpus when the seed arrives through the environment instead
    let mut args: Vec<String> = gen_args(via_flag.to_str().unwrap(), "99")
        .iter()
        .map(|s| s.to_string())
        .collect();
    let pos = args.iter().position(|a| a == "--seed").unwrap();
    args.drain(pos..pos + 2);
    let out = bin()
        .env("OMNIFLUX_SEED", "99")
        .args(&args)
        .output()
        .unwrap();
    assert_code(&out, 0);
    assert_eq!(dir_digest(&via_env), dir_digest(&via_flag));
    // a flag wins over the environment
    let via_both = tmp.path().join("both");
    let out = bin()
        .env("OMNIFLUX_SEED", "1234")
        .args(gen_args(via_both.to_str().unwrap(), "99"))
        .output()
        .unwrap();
    assert_code(&out, 0);
    assert_eq!(dir_digest(&via_env), dir_digest(&via_both));
}

#[test]
fn grad_check_single_loss_passes() {
    let out = run(&["grad-check", "--loss", "mim-fr"]);
    assert_code(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("pass"));
}

#[test]
fn help_exists_for_every_subcommand() {
    for sub in [
        "gen-data",
        "pretrain",
        "finetune",
        "eval",
        "embed",
        "grad-check",
    ] {
        let out = run(&[sub, "--help"]);
        assert_code(&out, 0);
    }
}
