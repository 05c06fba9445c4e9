use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::losses::LossConfig;
use crate::model::{ModelConfig, SamplingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(format!("unknown precision {other:?} (expected f32 or f64)")),
        }
    }
}

/// Optional architecture overrides applied on top of [`ModelConfig::new`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelOverrides {
    pub patch_size: Option<usize>,
    pub d_enc: Option<usize>,
    pub enc_layers: Option<usize>,
    pub enc_ff: Option<usize>,
    pub d_w: Option<usize>,
    pub dec_layers: Option<usize>,
    pub dec_ff: Option<usize>,
    pub heads: Option<usize>,
    pub d_align: Option<usize>,
}

impl ModelOverrides {
    pub fn apply(&self, cfg: &mut ModelConfig) {
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut cfg.patch_size, self.patch_size);
        set(&mut cfg.d_enc, self.d_enc);
        set(&mut cfg.enc_layers, self.enc_layers);
        set(&mut cfg.enc_ff, self.enc_ff);
        set(&mut cfg.d_w, self.d_w);
        set(&mut cfg.dec_layers, self.dec_layers);
        set(&mut cfg.dec_ff, self.dec_ff);
        set(&mut cfg.heads, self.heads);
        set(&mut cfg.d_align, self.d_align);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    /// Prebuilt `<sample_id>.pcgl` galleries; built in memory when unset.
    pub gallery_dir: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub sca: bool,
    pub eca: bool,
    pub tca: bool,
    /// Fixed bag-of-words text encoder with no gradient into the decoder.
    pub frozen_text: bool,
    pub loss: LossConfig,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
    pub eval_limit: Option<usize>,
    pub train_limit: Option<usize>,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub precision: Precision,
    pub sampling: SamplingConfig,
    pub model: ModelOverrides,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            gallery_dir: None,
            checkpoint_dir: PathBuf::from("checkpoints"),
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 10,
            max_steps_per_epoch: None,
            seed: 0,
            sca: true,
            eca: true,
            tca: true,
            frozen_text: false,
            loss: LossConfig::default(),
            eval_every: 1,
            eval_limit: None,
            train_limit: None,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
            precision: Precision::F32,
            sampling: SamplingConfig::default(),
            model: ModelOverrides::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| TrainError::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_limit(key: &str, value: &str) -> Result<Option<usize>, TrainError> {
    match value {
        "none" | "0" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "data_dir",
        "gallery_dir",
        "checkpoint_dir",
        "learning_rate",
        "batch_size",
        "epochs",
        "max_steps_per_epoch",
        "seed",
        "sca",
        "eca",
        "tca",
        "frozen_text",
        "tau",
        "alpha_v",
        "alpha_w",
        "denominator_mode",
        "dice_eps",
        "eval_every",
        "eval_limit",
        "train_limit",
        "weight_decay",
        "grad_clip_norm",
        "precision",
        "temperature",
        "top_p",
        "greedy",
        "max_len",
        "model.patch_size",
        "model.d_enc",
        "model.enc_layers",
        "model.enc_ff",
        "model.d_w",
        "model.dec_layers",
        "model.dec_ff",
        "model.heads",
        "model.d_align",
    ];

    /// Sets one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let m = &mut self.model;
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "gallery_dir" => self.gallery_dir = (value != "none").then(|| PathBuf::from(value)),
            "checkpoint_dir" => self.checkpoint_dir = PathBuf::from(value),
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "max_steps_per_epoch" => self.max_steps_per_epoch = parse_limit(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "sca" => self.sca = parse(key, value)?,
            "eca" => self.eca = parse(key, value)?,
            "tca" => self.tca = parse(key, value)?,
            "frozen_text" => self.frozen_text = parse(key, value)?,
            "tau" => self.loss.tau = parse(key, value)?,
            "alpha_v" => self.loss.alpha_v = parse(key, value)?,
            "alpha_w" => self.loss.alpha_w = parse(key, value)?,
            "denominator_mode" => self.loss.denominator_mode = parse(key, value)?,
            "dice_eps" => self.loss.dice_eps = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "eval_limit" => self.eval_limit = parse_limit(key, value)?,
            "train_limit" => self.train_limit = parse_limit(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "grad_clip_norm" => self.grad_clip_norm = parse(key, value)?,
            "precision" => self.precision = parse(key, value)?,
            "temperature" => self.sampling.temperature = parse(key, value)?,
            "top_p" => self.sampling.top_p = parse(key, value)?,
            "greedy" => self.sampling.greedy = parse(key, value)?,
            "max_len" => self.sampling.max_len = parse(key, value)?,
            "model.patch_size" => m.patch_size = Some(parse(key, value)?),
            "model.d_enc" => m.d_enc = Some(parse(key, value)?),
            "model.enc_layers" => m.enc_layers = Some(parse(key, value)?),
            "model.enc_ff" => m.enc_ff = Some(parse(key, value)?),
            "model.d_w" => m.d_w = Some(parse(key, value)?),
            "model.dec_layers" => m.dec_layers = Some(parse(key, value)?),
            "model.dec_ff" => m.dec_ff = Some(parse(key, value)?),
            "model.heads" => m.heads = Some(parse(key, value)?),
            "model.d_align" => m.d_align = Some(parse(key, value)?),
            other => return Err(TrainError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` lines over the defaults. `#` starts a
    /// comment; repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                TrainError::Config(format!("line {}: expected key = value", n + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(TrainError::Config(format!(
                    "line {}: duplicate key {k:?}",
                    n + 1
                )));
            }
            cfg.set(k, v)
                .map_err(|e| TrainError::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.data_dir);
        fix(&mut cfg.checkpoint_dir);
        if let Some(g) = cfg.gallery_dir.as_mut() {
            fix(g);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return err("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate must be positive");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return err("weight_decay must be nonnegative");
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm <= 0.0 {
            return err("grad_clip_norm must be positive");
        }
        self.loss
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        self.sampling
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig, TrainError> {
        let mut mc = ModelConfig::new(vocab_size);
        self.model.apply(&mut mc);
        mc.seed = self.seed;
        mc.validate().map_err(TrainError::Config)?;
        Ok(mc)
    }
}
