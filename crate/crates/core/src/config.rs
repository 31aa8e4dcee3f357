//! Flat `key = value` run configuration with named profiles.
//!
//! Resolution order: profile defaults, then the config file, then
//! `--set key=value` overrides. Unknown keys are errors, as are keys repeated
//! within one file.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::read_utf8;
use crate::training::{Objective, PretrainConfig};

/// Built-in hyperparameter sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Roberta,
    Elc,
    Mlsm,
}

impl Profile {
    pub fn for_objective(objective: Objective) -> Self {
        match objective {
            Objective::MlmStandard => Profile::Roberta,
            Objective::MlmElc => Profile::Elc,
            Objective::MlsmStudent => Profile::Mlsm,
        }
    }

    /// Learning rate, sequence length and batch size per the original runs;
    /// model width stays at desk scale.
    pub fn defaults(self) -> PretrainConfig {
        let base = PretrainConfig::default();
        match self {
            Profile::Roberta => PretrainConfig {
                objective: Objective::MlmStandard,
                lr: 5e-5,
                seq_len: 512,
                batch_size: 8,
                tokenizer: crate::tokenizers::TokenizerPreset::Roberta,
                ..base
            },
            Profile::Elc => PretrainConfig {
                objective: Objective::MlmElc,
                lr: 5e-4,
                seq_len: 128,
                batch_size: 128,
                tokenizer: crate::tokenizers::TokenizerPreset::Elc,
                ..base
            },
            Profile::Mlsm => PretrainConfig {
                objective: Objective::MlsmStudent,
                lr: 1e-4,
                seq_len: 128,
                batch_size: 64,
                tokenizer: crate::tokenizers::TokenizerPreset::Mlsm,
                ..base
            },
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "roberta" => Ok(Profile::Roberta),
            "elc" => Ok(Profile::Elc),
            "mlsm" => Ok(Profile::Mlsm),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected roberta, elc or mlsm)"))),
        }
    }
}

/// Every recognised key, in echo order.
pub const KEYS: &[&str] = &[
    "objective",
    "lr",
    "seq_len",
    "batch_size",
    "epochs",
    "mask_rate",
    "mask_fraction",
    "random_fraction",
    "keep_fraction",
    "seed",
    "weight_decay",
    "warmup_fraction",
    "grad_clip",
    "checkpoint_epochs",
    "num_layers",
    "num_heads",
    "hidden_dim",
    "ff_hidden",
    "init_std",
    "tokenizer",
    "vocab_size",
    "latent_k",
    "lambda",
    "teacher_layer",
    "dict_samples",
    "dict_iterations",
    "normalize_hidden",
];

/// `(key, value, 1-based line)` triples from `key = value` text. `#` starts
/// a comment; blank lines are skipped.
pub fn parse_key_values(text: &str, source: &Path) -> Result<Vec<(String, String, usize)>> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { path: source.to_path_buf(), line: line_no, message };
        let Some((k, v)) = line.split_once('=') else {
            return Err(err(format!("expected `key = value`, got `{line}`")));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(err("empty key".into()));
        }
        if let Some(first) = seen.insert(k.to_string(), line_no) {
            return Err(err(format!("duplicate key `{k}` (first set on line {first})")));
        }
        out.push((k.to_string(), v.to_string(), line_no));
    }
    Ok(out)
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!("override `{s}` is not of the form key=value"))),
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for key `{key}`")))
}

impl PretrainConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "objective" => self.objective = v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for key `objective`")))?,
            "lr" => self.lr = value(key, v)?,
            "seq_len" => self.seq_len = value(key, v)?,
            "batch_size" => self.batch_size = value(key, v)?,
            "epochs" => self.epochs = value(key, v)?,
            "mask_rate" => self.mask_rate = value(key, v)?,
            "mask_fraction" => self.policy.mask = value(key, v)?,
            "random_fraction" => self.policy.random = value(key, v)?,
            "keep_fraction" => self.policy.keep = value(key, v)?,
            "seed" => self.seed = value(key, v)?,
            "weight_decay" => self.weight_decay = value(key, v)?,
            "warmup_fraction" => self.warmup_fraction = value(key, v)?,
            "grad_clip" => self.grad_clip = value(key, v)?,
            "checkpoint_epochs" => {
                self.checkpoint_epochs = if v == "none" || v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|e| value(key, e.trim())).collect::<Result<_>>()?
                }
            }
            "num_layers" => self.num_layers = value(key, v)?,
            "num_heads" => self.num_heads = value(key, v)?,
            "hidden_dim" => self.hidden_dim = value(key, v)?,
            "ff_hidden" => self.ff_hidden = value(key, v)?,
            "init_std" => self.init_std = value(key, v)?,
            "tokenizer" => self.tokenizer = v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for key `tokenizer`")))?,
            "vocab_size" => self.vocab_size = value(key, v)?,
            "latent_k" => self.latent_k = value(key, v)?,
            "lambda" => self.lambda = value(key, v)?,
            "teacher_layer" => self.teacher_layer = if v == "auto" { None } else { Some(value(key, v)?) },
            "dict_samples" => self.dict_samples = value(key, v)?,
            "dict_iterations" => self.dict_iterations = value(key, v)?,
            "normalize_hidden" => self.normalize_hidden = value(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "objective" => self.objective.name().to_string(),
            "lr" => self.lr.to_string(),
            "seq_len" => self.seq_len.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "mask_rate" => self.mask_rate.to_string(),
            "mask_fraction" => self.policy.mask.to_string(),
            "random_fraction" => self.policy.random.to_string(),
            "keep_fraction" => self.policy.keep.to_string(),
            "seed" => self.seed.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "warmup_fraction" => self.warmup_fraction.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "checkpoint_epochs" if self.checkpoint_epochs.is_empty() => "none".to_string(),
            "checkpoint_epochs" => self
                .checkpoint_epochs
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "num_layers" => self.num_layers.to_string(),
            "num_heads" => self.num_heads.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "ff_hidden" => self.ff_hidden.to_string(),
            "init_std" => self.init_std.to_string(),
            "tokenizer" => self.tokenizer.name().to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            "latent_k" => self.latent_k.to_string(),
            "lambda" => self.lambda.to_string(),
            "teacher_layer" => self.teacher_layer.map_or("auto".to_string(), |l| l.to_string()),
            "dict_samples" => self.dict_samples.to_string(),
            "dict_iterations" => self.dict_iterations.to_string(),
            "normalize_hidden" => self.normalize_hidden.to_string(),
            other => unreachable!("key table out of sync: {other}"),
        }
    }

    /// Fully resolved configuration as `key = value` lines.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    /// Parses text written by [`PretrainConfig::to_text`] (or any subset of keys)
    /// on top of `base`.
    pub fn from_text(text: &str, source: &Path, base: PretrainConfig) -> Result<Self> {
        let mut cfg = base;
        for (k, v, line) in parse_key_values(text, source)? {
            cfg.set(&k, &v).map_err(|e| match e {
                Error::Config(message) => Error::Parse { path: source.to_path_buf(), line, message },
                other => other,
            })?;
        }
        Ok(cfg)
    }
}

/// Profile defaults, then `path` (when given), then `overrides` (`key=value`).
pub fn load_config(path: Option<&Path>, profile: Profile, overrides: &[String]) -> Result<PretrainConfig> {
    let mut cfg = profile.defaults();
    if let Some(p) = path {
        cfg = PretrainConfig::from_text(&read_utf8(p)?, p, cfg)?;
    }
    for o in overrides {
        let (k, v) = parse_override(o)?;
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
