//! Plain-text `key = value` configuration files. Blank lines and lines
//! starting with `#` are ignored; unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use regstream_core::{ModelConfig, TrainConfig};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot parse `{value}`")]
    Value { key: String, value: String },
    #[error("missing key `{0}`")]
    Missing(String),
}

pub type KeyValues = BTreeMap<String, String>;

pub fn parse(text: &str) -> Result<KeyValues, ConfigError> {
    let mut out = KeyValues::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or(ConfigError::Syntax { line: n + 1 })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: n + 1 });
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(ConfigError::Duplicate {
                line: n + 1,
                key: k.to_string(),
            });
        }
    }
    Ok(out)
}

fn set<T: FromStr>(kv: &KeyValues, key: &str, slot: &mut T) -> Result<(), ConfigError> {
    if let Some(v) = kv.get(key) {
        *slot = v.parse().map_err(|_| ConfigError::Value {
            key: key.to_string(),
            value: v.clone(),
        })?;
    }
    Ok(())
}

const MODEL_KEYS: &[&str] = &[
    "width",
    "layers",
    "heads",
    "ff_width",
    "registers",
    "groups",
    "entries",
    "gumbel_tau",
];

const TRAIN_KEYS: &[&str] = &[
    "alpha",
    "beta",
    "kappa",
    "distractors",
    "steps",
    "batch",
    "frames_min",
    "frames_max",
    "chunk_min",
    "chunk_max",
    "mask_prob",
    "mask_span",
    "lr_peak",
    "warmup_frac",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "tones",
    "period_min",
    "period_max",
    "gain",
    "noise",
    "hard_quantizer",
    "seed",
];

fn apply_model(kv: &KeyValues, m: &mut ModelConfig) -> Result<(), ConfigError> {
    set(kv, "width", &mut m.width)?;
    set(kv, "layers", &mut m.layers)?;
    set(kv, "heads", &mut m.heads)?;
    set(kv, "ff_width", &mut m.ff_width)?;
    set(kv, "registers", &mut m.registers)?;
    set(kv, "groups", &mut m.groups)?;
    set(kv, "entries", &mut m.entries)?;
    set(kv, "gumbel_tau", &mut m.gumbel_tau)
}

/// Model config from a file that must name every field.
pub fn model_from_kv(kv: &KeyValues) -> Result<ModelConfig, ConfigError> {
    if let Some(k) = kv.keys().find(|k| !MODEL_KEYS.contains(&k.as_str())) {
        return Err(ConfigError::UnknownKey(k.clone()));
    }
    if let Some(k) = MODEL_KEYS.iter().find(|k| !kv.contains_key(**k)) {
        return Err(ConfigError::Missing(k.to_string()));
    }
    let mut m = ModelConfig::default();
    apply_model(kv, &mut m)?;
    Ok(m)
}

pub fn model_to_text(m: &ModelConfig) -> String {
    let mut s = String::new();
    for (k, v) in [
        ("width", m.width.to_string()),
        ("layers", m.layers.to_string()),
        ("heads", m.heads.to_string()),
        ("ff_width", m.ff_width.to_string()),
        ("registers", m.registers.to_string()),
        ("groups", m.groups.to_string()),
        ("entries", m.entries.to_string()),
        ("gumbel_tau", m.gumbel_tau.to_string()),
    ] {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

/// Overrides fields of `base` with any model or training keys present.
pub fn apply_train(kv: &KeyValues, base: &mut TrainConfig) -> Result<(), ConfigError> {
    if let Some(k) = kv
        .keys()
        .find(|k| !MODEL_KEYS.contains(&k.as_str()) && !TRAIN_KEYS.contains(&k.as_str()))
    {
        return Err(ConfigError::UnknownKey(k.clone()));
    }
    apply_model(kv, &mut base.model)?;
    let w = &mut base.weights;
    set(kv, "alpha", &mut w.alpha)?;
    set(kv, "beta", &mut w.beta)?;
    set(kv, "kappa", &mut w.kappa)?;
    set(kv, "distractors", &mut w.distractors)?;
    set(kv, "steps", &mut base.steps)?;
    set(kv, "batch", &mut base.batch)?;
    set(kv, "frames_min", &mut base.frames_min)?;
    set(kv, "frames_max", &mut base.frames_max)?;
    set(kv, "chunk_min", &mut base.chunk_min)?;
    set(kv, "chunk_max", &mut base.chunk_max)?;
    set(kv, "mask_prob", &mut base.mask_prob)?;
    set(kv, "mask_span", &mut base.mask_span)?;
    set(kv, "lr_peak", &mut base.lr_peak)?;
    set(kv, "warmup_frac", &mut base.warmup_frac)?;
    set(kv, "adam_beta1", &mut base.adam_beta1)?;
    set(kv, "adam_beta2", &mut base.adam_beta2)?;
    set(kv, "adam_eps", &mut base.adam_eps)?;
    let d = &mut base.data;
    set(kv, "tones", &mut d.tones)?;
    set(kv, "period_min", &mut d.period_min)?;
    set(kv, "period_max", &mut d.period_max)?;
    set(kv, "gain", &mut d.gain)?;
    set(kv, "noise", &mut d.noise)?;
    set(kv, "hard_quantizer", &mut base.hard_quantizer)?;
    set(kv, "seed", &mut base.seed)
}
