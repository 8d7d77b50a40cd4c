//! Run configuration: presets plus flat `key = value` files.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::model::{ModelConfig, Variant};
use crate::optim::AdamConfig;
use crate::tensor::Precision;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("unknown preset {0:?} (expected desk or paper-base)")]
    UnknownPreset(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    PaperBase,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::PaperBase => "paper-base",
        }
    }
}

impl FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper-base" => Ok(Preset::PaperBase),
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    /// `vocab_size` is replaced by the corpus vocabulary at train time;
    /// `total_steps` follows `steps`.
    pub model: ModelConfig,
    /// StableMoE freeze step; `None` means `steps / 10`.
    pub stage_boundary: Option<usize>,
    pub corpus: PathBuf,
    /// Train, validation, test fractions.
    pub splits: [f64; 3],
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub eval_interval: usize,
    pub ckpt_interval: usize,
    /// Validation batches per evaluation; 0 evaluates the whole split.
    pub val_batches: usize,
    pub out_dir: PathBuf,
    pub precision: Precision,
    /// Record real elapsed time in metrics rows (otherwise 0, keeping files reproducible).
    pub record_wall_time: bool,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::PaperBase => Self {
                preset: p,
                model: ModelConfig::default(),
                stage_boundary: None,
                corpus: PathBuf::from("data/enwik8"),
                splits: [0.9, 0.05, 0.05],
                batch_size: 22,
                steps: 100_000,
                lr: 2.5e-4,
                beta1: 0.9,
                beta2: 0.999,
                adam_eps: 1e-8,
                clip_norm: 0.25,
                eval_interval: 1000,
                ckpt_interval: 5000,
                val_batches: 0,
                out_dir: PathBuf::from("runs/paper-base"),
                precision: Precision::F32,
                record_wall_time: false,
            },
            Preset::Desk => Self {
                preset: p,
                model: ModelConfig {
                    n_layers: 2,
                    d_model: 128,
                    n_heads: 4,
                    d_exp: 256,
                    n_experts: 8,
                    k_train: 2,
                    k_eval: 2,
                    vocab_size: 256,
                    seq_len: 128,
                    seed: 7,
                    ..ModelConfig::default()
                },
                stage_boundary: None,
                corpus: PathBuf::from("data/shakespeare-1mb.txt"),
                splits: [0.9, 0.05, 0.05],
                batch_size: 16,
                steps: 2000,
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                adam_eps: 1e-8,
                clip_norm: 0.25,
                eval_interval: 200,
                ckpt_interval: 500,
                val_batches: 0,
                out_dir: PathBuf::from("runs/desk"),
                precision: Precision::F32,
                record_wall_time: false,
            },
        }
    }

    /// Model configuration with the derived fields filled in.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            total_steps: self.steps.max(1),
            stage_boundary: self.stage_boundary.unwrap_or(self.steps / 10),
            ..self.model.clone()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.model_config(self.model.vocab_size.max(2))
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.splits.iter().any(|&s| !(0.0..=1.0).contains(&s)) || (self.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {:?} must be in [0, 1] and sum to 1", self.splits));
        }
        if self.splits[0] == 0.0 {
            return bad("train split is empty".into());
        }
        if self.batch_size == 0 || self.steps == 0 || self.eval_interval == 0 || self.ckpt_interval == 0 {
            return bad("batch_size, steps, eval_interval and ckpt_interval must be positive".into());
        }
        if self.model.seq_len < 2 {
            return bad("seq_len must be at least 2".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("optimizer settings out of range".into());
        }
        if self.clip_norm < 0.0 {
            return bad("clip_norm must be non-negative".into());
        }
        if let Some(b) = self.stage_boundary {
            if b > self.steps {
                return bad(format!("stage_boundary {b} beyond steps {}", self.steps));
            }
        }
        Ok(())
    }

    /// Parses a config file on top of `base` (or on top of the preset named
    /// by a `preset` key in the file).
    pub fn from_text(text: &str, base: Preset) -> Result<Self, ConfigError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(ConfigError::UnknownKey {
                    line: i + 1,
                    key: k.to_string(),
                });
            }
            entries.push((k, v));
        }
        let preset = match entries.iter().rev().find(|(k, _)| *k == "preset") {
            Some((_, v)) => v.parse()?,
            None => base,
        };
        let mut cfg = Self::preset(preset);
        for (k, v) in entries {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn p<V: FromStr>(key: &str, value: &str) -> Result<V, ConfigError>
        where
            V::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: V::Err| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                reason: e.to_string(),
            })
        }
        let m = &mut self.model;
        match key {
            "preset" => self.preset = value.parse()?,
            "variant" => {
                m.variant = value.parse::<Variant>().map_err(|e| ConfigError::BadValue {
                    key: key.into(),
                    value: value.into(),
                    reason: e.to_string(),
                })?
            }
            "seed" => m.seed = p(key, value)?,
            "n_layers" => m.n_layers = p(key, value)?,
            "d_model" => m.d_model = p(key, value)?,
            "n_heads" => m.n_heads = p(key, value)?,
            "d_exp" => m.d_exp = p(key, value)?,
            "n_experts" => m.n_experts = p(key, value)?,
            "k_train" => m.k_train = p(key, value)?,
            "k_eval" => m.k_eval = p(key, value)?,
            "vocab_size" => m.vocab_size = p(key, value)?,
            "seq_len" => m.seq_len = p(key, value)?,
            "dropout" => m.dropout = p(key, value)?,
            "alpha" => m.alpha = p(key, value)?,
            "beta" => m.beta = p(key, value)?,
            "tau_u" => m.tau_u = p(key, value)?,
            "tau_r" => m.tau_r = p(key, value)?,
            "d_low" => m.d_low = p(key, value)?,
            "stage_boundary" => {
                self.stage_boundary = match value {
                    "auto" => None,
                    v => Some(p(key, v)?),
                }
            }
            "corpus" => self.corpus = PathBuf::from(value),
            "split_train" => self.splits[0] = p(key, value)?,
            "split_val" => self.splits[1] = p(key, value)?,
            "split_test" => self.splits[2] = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "steps" => self.steps = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "beta1" => self.beta1 = p(key, value)?,
            "beta2" => self.beta2 = p(key, value)?,
            "adam_eps" => self.adam_eps = p(key, value)?,
            "clip_norm" => self.clip_norm = p(key, value)?,
            "eval_interval" => self.eval_interval = p(key, value)?,
            "ckpt_interval" => self.ckpt_interval = p(key, value)?,
            "val_batches" => self.val_batches = p(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "precision" => {
                self.precision = Precision::parse(value).ok_or_else(|| ConfigError::BadValue {
                    key: key.into(),
                    value: value.into(),
                    reason: "expected f32 or f64".into(),
                })?
            }
            "record_wall_time" => self.record_wall_time = p(key, value)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Canonical text: every key, fixed order, one per line.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("preset", self.preset.name().into());
        put("variant", m.variant.name().into());
        put("seed", m.seed.to_string());
        put("n_layers", m.n_layers.to_string());
        put("d_model", m.d_model.to_string());
        put("n_heads", m.n_heads.to_string());
        put("d_exp", m.d_exp.to_string());
        put("n_experts", m.n_experts.to_string());
        put("k_train", m.k_train.to_string());
        put("k_eval", m.k_eval.to_string());
        put("vocab_size", m.vocab_size.to_string());
        put("seq_len", m.seq_len.to_string());
        put("dropout", m.dropout.to_string());
        put("alpha", m.alpha.to_string());
        put("beta", m.beta.to_string());
        put("tau_u", m.tau_u.to_string());
        put("tau_r", m.tau_r.to_string());
        put("d_low", m.d_low.to_string());
        put(
            "stage_boundary",
            self.stage_boundary.map_or("auto".into(), |b| b.to_string()),
        );
        put("corpus", self.corpus.display().to_string());
        put("split_train", self.splits[0].to_string());
        put("split_val", self.splits[1].to_string());
        put("split_test", self.splits[2].to_string());
        put("batch_size", self.batch_size.to_string());
        put("steps", self.steps.to_string());
        put("lr", self.lr.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("adam_eps", self.adam_eps.to_string());
        put("clip_norm", self.clip_norm.to_string());
        put("eval_interval", self.eval_interval.to_string());
        put("ckpt_interval", self.ckpt_interval.to_string());
        put("val_batches", self.val_batches.to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("precision", self.precision.name().into());
        put("record_wall_time", self.record_wall_time.to_string());
        s
    }
}

/// Every accepted config key.
pub const KEYS: &[&str] = &[
    "preset",
    "variant",
    "seed",
    "n_layers",
    "d_model",
    "n_heads",
    "d_exp",
    "n_experts",
    "k_train",
    "k_eval",
    "vocab_size",
    "seq_len",
    "dropout",
    "alpha",
    "beta",
    "tau_u",
    "tau_r",
    "d_low",
    "stage_boundary",
    "corpus",
    "split_train",
    "split_val",
    "split_test",
    "batch_size",
    "steps",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "clip_norm",
    "eval_interval",
    "ckpt_interval",
    "val_batches",
    "out_dir",
    "precision",
    "record_wall_time",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        for p in [Preset::Desk, Preset::PaperBase] {
            let mut c = RunConfig::preset(p);
            c.model.tau_r = 0.07;
            c.lr = 3.3e-4;
            c.stage_boundary = Some(17);
            let back = RunConfig::from_text(&c.to_text(), Preset::Desk).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_text(), c.to_text());
        }
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let e = RunConfig::from_text("seed = 3\n\nlearning_rate = 1\n", Preset::Desk).unwrap_err();
        assert_eq!(
            e,
            ConfigError::UnknownKey {
                line: 3,
                key: "learning_rate".into()
            }
        );
    }

    #[test]
    fn preset_key_selects_base() {
        let c = RunConfig::from_text("# comment\npreset = paper-base\nsteps = 5\n", Preset::Desk).unwrap();
        assert_eq!(c.preset, Preset::PaperBase);
        assert_eq!(c.model.d_model, 256);
        assert_eq!(c.steps, 5);
    }

    #[test]
    fn presets_validate() {
        RunConfig::preset(Preset::Desk).validate().unwrap();
        let pb = RunConfig::preset(Preset::PaperBase);
        pb.validate().unwrap();
        assert_eq!(pb.lr, 2.5e-4);
        assert_eq!(pb.steps, 100_000);
        assert_eq!(pb.model.seq_len, 512);
    }

    #[test]
    fn bad_values() {
        assert!(matches!(
            RunConfig::from_text("steps = many", Preset::Desk),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            RunConfig::from_text("no equals sign", Preset::Desk),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        let mut c = RunConfig::preset(Preset::Desk);
        c.splits = [0.5, 0.2, 0.2];
        assert!(c.validate().is_err());
    }
}
