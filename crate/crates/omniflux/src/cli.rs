//! Command implementations behind the binary's subcommands. Each returns
//! `Ok(())` on full success; errors map to process exit codes via
//! [`Error::exit_code`].

use std::path::Path;

use crate::config::{RunConfig, SEED_ENV_VAR};
use crate::data::{self, generate_corpus, CrossPairDataset, PairDataset};
use crate::error::{Error, Result};
use crate::eval::{
    embed_crosspairs, embed_pairs, evaluate_suite, export_embeddings, finetune_classifier,
    finetune_retrieval_crosspairs, finetune_retrieval_pairs, load_finetuned, recall_at_k,
    save_finetuned, RetrievalTask, SuiteStates,
};
use crate::gradcheck;
use crate::train::{run_pretraining, RunOutcome};

/// Assemble the effective configuration: defaults < file < --set flags,
/// then the seed: --seed flag < file < environment < default.
pub fn effective_config(
    config_path: Option<&Path>,
    sets: &[String],
    seed_flag: Option<u64>,
) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seed_from_inputs = false;
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        seed_from_inputs |= text_sets_seed(&text)?;
        cfg.apply_text(&text)?;
    }
    for kv in sets {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        seed_from_inputs |= key.trim() == "train.seed";
        cfg.set(key, value)?;
    }
    if let Some(seed) = seed_flag {
        cfg.train.seed = seed;
    } else if !seed_from_inputs {
        if let Ok(text) = std::env::var(SEED_ENV_VAR) {
            cfg.train.seed = text.parse::<u64>().map_err(|_| {
                Error::Config(format!("{SEED_ENV_VAR}={text:?} is not a valid seed"))
            })?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn text_sets_seed(text: &str) -> Result<bool> {
    for raw in text.lines() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if let Some((key, _)) = line.split_once('=') {
            if key.trim() == "train.seed" {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Echo the effective configuration into the run's output directory.
fn write_effective_config(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("config.txt");
    std::fs::write(&path, cfg.render()).map_err(|e| Error::io(&path, e))
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_effective_config(cfg, out)?;
    let manifest = generate_corpus(out, &cfg.gen_config(), cfg.train.seed)?;
    print!("{}", manifest.render());
    Ok(())
}

pub fn cmd_pretrain(
    cfg: &RunConfig,
    data: &Path,
    stage: u8,
    resume: Option<&Path>,
    out: &Path,
) -> Result<()> {
    write_effective_config(cfg, out)?;
    let RunOutcome {
        final_step,
        metrics_path,
        checkpoint_path,
        ..
    } = run_pretraining(
        stage,
        cfg.model,
        cfg.train,
        cfg.weights,
        data,
        resume,
        out,
        None,
    )?;
    println!("stage {stage} finished at step {final_step}");
    println!("checkpoint: {}", checkpoint_path.display());
    println!("metrics: {}", metrics_path.display());
    Ok(())
}

/// Which fine-tune task, from its CLI name.
fn parse_task(task: &str) -> Result<&'static str> {
    match task {
        "cc" | "mpc" | "t2i" | "q2p" | "i2p" => Ok(match task {
            "cc" => "cc",
            "mpc" => "mpc",
            "t2i" => "t2i",
            "q2p" => "q2p",
            _ => "i2p",
        }),
        other => Err(Error::Config(format!(
            "unknown task {other:?}; expected cc|mpc|t2i|q2p|i2p"
        ))),
    }
}

pub fn cmd_finetune(
    cfg: &RunConfig,
    task: &str,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    k_override: Option<usize>,
) -> Result<()> {
    let task = parse_task(task)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_effective_config(cfg, out)?;
    let ckpt = crate::train::load_checkpoint(checkpoint)?;
    let mut state = crate::train::model_from_checkpoint(&ckpt)?;
    if let Some(k) = k_override {
        state.split_layers(k)?;
    }
    let ft = cfg.finetune;
    let out_path = out.join(format!("{task}.ckpt"));
    match task {
        "cc" | "mpc" => {
            let (train_file, eval_file) = if task == "cc" {
                (data::CC_TRAIN, data::CC_EVAL)
            } else {
                (data::MPC_TRAIN, data::MPC_EVAL)
            };
            let train = PairDataset::load(data, train_file)?;
            let eval = PairDataset::load(data, eval_file)?;
            let (acc, state, head) = finetune_classifier(state, &train, &eval, &ft)?;
            save_finetuned(&out_path, &state, Some(&head), task)?;
            println!("{task} accuracy: {acc:.4}");
        }
        "t2i" => {
            let train = PairDataset::load(data, data::T2I_TRAIN)?;
            let state = finetune_retrieval_pairs(state, &train, &ft)?;
            let eval = PairDataset::load(data, data::T2I_EVAL)?;
            let (fs, gs, _) = embed_pairs(&state, &eval);
            let gt: Vec<usize> = (0..eval.len()).collect();
            save_finetuned(&out_path, &state, None, task)?;
            println!("t2i r@1: {:.4}", recall_at_k(&fs, &gs, &gt, 1));
            println!("i2t r@1: {:.4}", recall_at_k(&gs, &fs, &gt, 1));
        }
        "q2p" | "i2p" => {
            let (rt, train_file, eval_file) = if task == "q2p" {
                (
                    RetrievalTask::QueryToProduct,
                    data::Q2P_TRAIN,
                    data::Q2P_EVAL,
                )
            } else {
                (
                    RetrievalTask::ImageToProduct,
                    data::I2P_TRAIN,
                    data::I2P_EVAL,
                )
            };
            let train = CrossPairDataset::load(data, train_file)?;
            let state = finetune_retrieval_crosspairs(state, rt, &train, &ft)?;
            let eval = CrossPairDataset::load(data, eval_file)?;
            let (qs, hs, gs) = embed_crosspairs(&state, &eval, rt)?;
            let gt: Vec<usize> = (0..eval.len()).collect();
            save_finetuned(&out_path, &state, None, task)?;
            println!("{task} r@1: {:.4}", recall_at_k(&qs, &hs, &gt, 1));
            if task == "i2p" {
                println!("i2pi r@1: {:.4}", recall_at_k(&qs, &gs, &gt, 1));
            }
        }
        _ => unreachable!(),
    }
    println!("state: {}", out_path.display());
    Ok(())
}

/// Metric names served by each fine-tuned state file.
const STATE_FILES: [(&str, &[&str]); 5] = [
    ("cc.ckpt", &["cc"]),
    ("mpc.ckpt", &["mpc"]),
    ("t2i.ckpt", &["t2i", "i2t"]),
    ("q2p.ckpt", &["q2p"]),
    ("i2p.ckpt", &["i2p", "i2pi"]),
];

pub fn cmd_eval(states_dir: &Path, data: &Path, out: Option<&Path>, seed: u64) -> Result<()> {
    let mut missing = Vec::new();
    for (file, tasks) in STATE_FILES {
        if !states_dir.join(file).is_file() {
            missing.push(format!("{} ({file})", tasks.join(", ")));
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingStates(missing.join("; ")));
    }
    let load = |file: &str, want_head: bool, task: &str| -> Result<_> {
        let (state, head, tag) = load_finetuned(&states_dir.join(file))?;
        if tag != task {
            return Err(Error::Config(format!(
                "{file} holds a state fine-tuned for {tag:?}, expected {task:?}"
            )));
        }
        if want_head && head.is_none() {
            return Err(Error::Format(format!("{file} lacks a classifier head")));
        }
        Ok((state, head))
    };
    let (cc_state, cc_head) = load("cc.ckpt", true, "cc")?;
    let (mpc_state, mpc_head) = load("mpc.ckpt", true, "mpc")?;
    let (t2i_state, _) = load("t2i.ckpt", false, "t2i")?;
    let (q2p_state, _) = load("q2p.ckpt", false, "q2p")?;
    let (i2p_state, _) = load("i2p.ckpt", false, "i2p")?;
    let states = SuiteStates {
        cc: (cc_state, cc_head.expect("checked")),
        mpc: (mpc_state, mpc_head.expect("checked")),
        t2i: t2i_state,
        q2p: q2p_state,
        i2p: i2p_state,
    };
    let report = evaluate_suite(&states, data, seed, &states_dir.display().to_string())?;
    let json = report.to_json();
    if let Some(path) = out {
        std::fs::write(path, format!("{json}\n")).map_err(|e| Error::io(path, e))?;
    }
    println!("{json}");
    Ok(())
}

pub fn cmd_embed(checkpoint: &Path, data: &Path, split: &str, out: &Path) -> Result<()> {
    let ckpt = crate::train::load_checkpoint(checkpoint)?;
    let state = crate::train::model_from_checkpoint(&ckpt)?;
    let ds = PairDataset::load(data, split)?;
    export_embeddings(&state, &ds, out)?;
    println!("wrote {} embedding rows to {}", ds.len(), out.display());
    Ok(())
}

/// Returns an error with exit code 1 semantics (via Err) when any loss
/// fails its tolerance.
pub fn cmd_grad_check(loss: &str) -> Result<()> {
    let checks = if loss == "all" {
        gradcheck::check_all()?
    } else {
        vec![gradcheck::check_loss(loss)?]
    };
    let mut all_ok = true;
    for c in &checks {
        println!(
            "{:<10} max_rel_err={:.3e}  {}",
            c.name,
            c.max_rel_err,
            if c.passed() { "pass" } else { "FAIL" }
        );
        all_ok &= c.passed();
    }
    if !all_ok {
        return Err(Error::Train("gradient check failed".into()));
    }
    Ok(())
}

/// Newtype re-export so the binary can stay a thin argument parser.
pub use crate::error::Error as CliError;
