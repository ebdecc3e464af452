//! Run configuration: a key=value file with `#` comments, overridable by
//! command-line `--set key=value` flags. Every key is validated against the
//! schema; unknown keys are errors so typos cannot silently revert to
//! defaults.

use std::path::Path;

use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::eval::FinetuneConfig;
use crate::model::ModelConfig;
use crate::objectives::TaskWeights;
use crate::train::TrainConfig;

/// Environment variable consulted for a seed when neither the flag nor the
/// config file provides one.
pub const SEED_ENV_VAR: &str = "OMNIFLUX_SEED";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub weights: TaskWeights,
    pub gen_n_concepts: usize,
    pub gen_mpc_concepts: usize,
    pub gen_n_pairs: usize,
    pub gen_n_crosspairs: usize,
    pub gen_downstream_train: usize,
    pub gen_downstream_eval: usize,
    /// Pixel noise sigma in thousandths (kept integral for exact parsing).
    pub gen_noise_milli: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = GenConfig::default();
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            weights: TaskWeights::default(),
            gen_n_concepts: gen.n_concepts,
            gen_mpc_concepts: gen.mpc_concepts,
            gen_n_pairs: gen.n_pairs,
            gen_n_crosspairs: gen.n_crosspairs,
            gen_downstream_train: gen.downstream_train,
            gen_downstream_eval: gen.downstream_eval,
            gen_noise_milli: (gen.noise_std * 1000.0).round() as u32,
        }
    }
}

macro_rules! parse_as {
    ($value:expr, $key:expr, $t:ty) => {
        $value
            .trim()
            .parse::<$t>()
            .map_err(|_| Error::Config(format!("key {}: cannot parse {:?}", $key, $value.trim())))?
    };
}

impl RunConfig {
    /// The generator view of this config; vocabulary and image geometry
    /// always mirror the model so the corpus cannot drift out of sync.
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            n_concepts: self.gen_n_concepts,
            mpc_concepts: self.gen_mpc_concepts,
            n_pairs: self.gen_n_pairs,
            n_crosspairs: self.gen_n_crosspairs,
            downstream_train: self.gen_downstream_train,
            downstream_eval: self.gen_downstream_eval,
            vocab_size: self.model.vocab_size,
            image_side: self.model.image_side,
            noise_std: self.gen_noise_milli as f64 / 1000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.weights.validate()?;
        self.gen_config().validate()?;
        if self.finetune.learning_rate <= 0.0
            || self.finetune.epochs == 0
            || self.finetune.batch_size == 0
        {
            return Err(Error::Config("bad finetune settings".into()));
        }
        Ok(())
    }

    /// Assign one key. Unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.trim() {
            "model.vocab_size" => self.model.vocab_size = parse_as!(value, key, usize),
            "model.hidden_dim" => self.model.hidden_dim = parse_as!(value, key, usize),
            "model.num_heads" => self.model.num_heads = parse_as!(value, key, usize),
            "model.total_layers" => self.model.total_layers = parse_as!(value, key, usize),
            "model.text_layers_k" => self.model.text_layers_k = parse_as!(value, key, usize),
            "model.image_patch_size" => self.model.image_patch_size = parse_as!(value, key, usize),
            "model.image_side" => self.model.image_side = parse_as!(value, key, usize),
            "model.proj_dim" => self.model.proj_dim = parse_as!(value, key, usize),
            "model.max_text_len" => self.model.max_text_len = parse_as!(value, key, usize),
            "model.mim_feat_dim" => self.model.mim_feat_dim = parse_as!(value, key, usize),
            "model.mim_clusters" => self.model.mim_clusters = parse_as!(value, key, usize),
            "train.learning_rate" => self.train.learning_rate = parse_as!(value, key, f64),
            "train.batch_size" => self.train.batch_size = parse_as!(value, key, usize),
            "train.total_steps" => self.train.total_steps = parse_as!(value, key, u64),
            "train.stage2_steps" => self.train.stage2_steps = parse_as!(value, key, u64),
            "train.seed" => self.train.seed = parse_as!(value, key, u64),
            "train.p_img_txt" => self.train.p_img_txt = parse_as!(value, key, f64),
            "finetune.learning_rate" => self.finetune.learning_rate = parse_as!(value, key, f64),
            "finetune.epochs" => self.finetune.epochs = parse_as!(value, key, usize),
            "finetune.batch_size" => self.finetune.batch_size = parse_as!(value, key, usize),
            "finetune.seed" => self.finetune.seed = parse_as!(value, key, u64),
            "weights.mlm" => self.weights.mlm = parse_as!(value, key, f64),
            "weights.mim_kl" => self.weights.mim_kl = parse_as!(value, key, f64),
            "weights.mim_fr" => self.weights.mim_fr = parse_as!(value, key, f64),
            "weights.itc" => self.weights.itc = parse_as!(value, key, f64),
            "weights.itm" => self.weights.itm = parse_as!(value, key, f64),
            "weights.omni" => self.weights.omni = parse_as!(value, key, f64),
            "gen.n_concepts" => self.gen_n_concepts = parse_as!(value, key, usize),
            "gen.mpc_concepts" => self.gen_mpc_concepts = parse_as!(value, key, usize),
            "gen.n_pairs" => self.gen_n_pairs = parse_as!(value, key, usize),
            "gen.n_crosspairs" => self.gen_n_crosspairs = parse_as!(value, key, usize),
            "gen.downstream_train" => self.gen_downstream_train = parse_as!(value, key, usize),
            "gen.downstream_eval" => self.gen_downstream_eval = parse_as!(value, key, usize),
            "gen.noise_milli" => self.gen_noise_milli = parse_as!(value, key, u32),
            other => {
                return Err(Error::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Parse key=value text (UTF-8, `#` comments, blank lines allowed) on
    /// top of the defaults. Never panics on malformed input.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (ln, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key=value", ln + 1))
            })?;
            self.set(key, value)
                .map_err(|e| Error::Config(format!("config line {}: {e}", ln + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = RunConfig::parse(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Effective configuration as key=value text (parseable back).
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let f = &self.finetune;
        let w = &self.weights;
        format!(
            "model.vocab_size={}\nmodel.hidden_dim={}\nmodel.num_heads={}\n\
             model.total_layers={}\nmodel.text_layers_k={}\nmodel.image_patch_size={}\n\
             model.image_side={}\nmodel.proj_dim={}\nmodel.max_text_len={}\n\
             model.mim_feat_dim={}\nmodel.mim_clusters={}\n\
             train.learning_rate={}\ntrain.batch_size={}\ntrain.total_steps={}\n\
             train.stage2_steps={}\ntrain.seed={}\ntrain.p_img_txt={}\n\
             finetune.learning_rate={}\nfinetune.epochs={}\nfinetune.batch_size={}\n\
             finetune.seed={}\n\
             weights.mlm={}\nweights.mim_kl={}\nweights.mim_fr={}\nweights.itc={}\n\
             weights.itm={}\nweights.omni={}\n\
             gen.n_concepts={}\ngen.mpc_concepts={}\ngen.n_pairs={}\ngen.n_crosspairs={}\n\
             gen.downstream_train={}\ngen.downstream_eval={}\ngen.noise_milli={}\n",
            m.vocab_size,
            m.hidden_dim,
            m.num_heads,
            m.total_layers,
            m.text_layers_k,
            m.image_patch_size,
            m.image_side,
            m.proj_dim,
            m.max_text_len,
            m.mim_feat_dim,
            m.mim_clusters,
            t.learning_rate,
            t.batch_size,
            t.total_steps,
            t.stage2_steps,
            t.seed,
            t.p_img_txt,
            f.learning_rate,
            f.epochs,
            f.batch_size,
            f.seed,
            w.mlm,
            w.mim_kl,
            w.mim_fr,
            w.itc,
            w.itm,
            w.omni,
            self.gen_n_concepts,
            self.gen_mpc_concepts,
            self.gen_n_pairs,
            self.gen_n_crosspairs,
            self.gen_downstream_train,
            self.gen_downstream_eval,
            self.gen_noise_milli,
        )
    }
}
