//! Flat `key = value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use vsod_core::encoder::EncoderConfig;
use vsod_core::memory::DecoderFeature;
use vsod_core::moe::{LoraMoeConfig, EXPERTS_PER_GROUP};
use vsod_core::{MemoryConfig, MemoryVariant, ModelConfig};
use vsod_data::PseudoDepth;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "M4_SEED";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{}line {line}: {msg}", .path.as_ref().map(|p| format!("{}: ", p.display())).unwrap_or_default())]
pub struct ConfigError {
    pub path: Option<PathBuf>,
    pub line: usize,
    pub msg: String,
}

/// Depth input used for training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthSource {
    Actual,
    Pseudo(PseudoDepth),
}

impl DepthSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DepthSource::Actual => "actual",
            DepthSource::Pseudo(p) => p.as_str(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Dataset root holding `train/` and `val/`.
    pub data: PathBuf,
    /// Directory for checkpoints and the loss log.
    pub out: PathBuf,
    pub input_size: usize,
    pub clip_len: usize,
    pub rank: usize,
    pub experts: usize,
    pub top_k: usize,
    pub moe_lambda: f64,
    pub lr_adapter: f64,
    pub lr_other: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    /// Optimizer steps; 0 derives the count from `epochs`.
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub detach: bool,
    /// Memory bank size at evaluation time.
    pub test_memory: usize,
    pub variant: MemoryVariant,
    pub feature: DecoderFeature,
    pub depth: DepthSource,
    pub flip: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            out: PathBuf::from("runs"),
            input_size: 64,
            clip_len: 4,
            rank: 4,
            experts: EXPERTS_PER_GROUP,
            top_k: 2,
            moe_lambda: 1e-2,
            lr_adapter: 1e-4,
            lr_other: 1e-3,
            weight_decay: 5e-4,
            grad_clip: 5.0,
            epochs: 5,
            steps: 0,
            batch: 4,
            seed: 7,
            detach: false,
            test_memory: 4,
            variant: MemoryVariant::MemoryGatedMlf,
            feature: DecoderFeature::Level2,
            depth: DepthSource::Actual,
            flip: false,
        }
    }
}

/// Keys that change the parameter layout; a checkpoint only loads into a
/// model agreeing on all of them.
pub const ARCHITECTURE_KEYS: [&str; 6] = ["input_size", "rank", "experts", "top_k", "variant", "feature"];

fn parse_variant(v: &str) -> Option<MemoryVariant> {
    Some(match v {
        "baseline" => MemoryVariant::Baseline,
        "memory" => MemoryVariant::Memory,
        "gated-mlf" => MemoryVariant::MemoryGatedMlf,
        _ => return None,
    })
}

fn variant_str(v: MemoryVariant) -> &'static str {
    match v {
        MemoryVariant::Baseline => "baseline",
        MemoryVariant::Memory => "memory",
        MemoryVariant::MemoryGatedMlf => "gated-mlf",
    }
}

fn parse_feature(v: &str) -> Option<DecoderFeature> {
    Some(match v {
        "d1" => DecoderFeature::Level1,
        "d2" => DecoderFeature::Level2,
        "both" => DecoderFeature::Both,
        _ => return None,
    })
}

fn feature_str(f: DecoderFeature) -> &'static str {
    match f {
        DecoderFeature::Level1 => "d1",
        DecoderFeature::Level2 => "d2",
        DecoderFeature::Both => "both",
    }
}

fn parse_depth(v: &str) -> Option<DepthSource> {
    Some(match v {
        "actual" => DepthSource::Actual,
        "copy" => DepthSource::Pseudo(PseudoDepth::Copy),
        "black" => DepthSource::Pseudo(PseudoDepth::Black),
        _ => return None,
    })
}

fn num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn flag(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn choice<T>(v: &str, parsed: Option<T>, options: &str) -> Result<T, String> {
    parsed.ok_or_else(|| format!("`{v}` is not one of {options}"))
}

impl RunConfig {
    /// Sets one key. Errors name the problem without a line number.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "data" => self.data = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            "input_size" => self.input_size = num(value)?,
            "clip_len" => self.clip_len = num(value)?,
            "rank" => self.rank = num(value)?,
            "experts" => self.experts = num(value)?,
            "top_k" => self.top_k = num(value)?,
            "moe_lambda" => self.moe_lambda = num(value)?,
            "lr_adapter" => self.lr_adapter = num(value)?,
            "lr_other" => self.lr_other = num(value)?,
            "weight_decay" => self.weight_decay = num(value)?,
            "grad_clip" => self.grad_clip = num(value)?,
            "epochs" => self.epochs = num(value)?,
            "steps" => self.steps = num(value)?,
            "batch" => self.batch = num(value)?,
            "seed" => self.seed = num(value)?,
            "detach" => self.detach = flag(value)?,
            "test_memory" => self.test_memory = num(value)?,
            "variant" => self.variant = choice(value, parse_variant(value), "baseline, memory, gated-mlf")?,
            "feature" => self.feature = choice(value, parse_feature(value), "d1, d2, both")?,
            "depth" => self.depth = choice(value, parse_depth(value), "actual, copy, black")?,
            "flip" => self.flip = flag(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every key with its canonical value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("data", self.data.display().to_string()),
            ("out", self.out.display().to_string()),
            ("input_size", self.input_size.to_string()),
            ("clip_len", self.clip_len.to_string()),
            ("rank", self.rank.to_string()),
            ("experts", self.experts.to_string()),
            ("top_k", self.top_k.to_string()),
            ("moe_lambda", format!("{:?}", self.moe_lambda)),
            ("lr_adapter", format!("{:?}", self.lr_adapter)),
            ("lr_other", format!("{:?}", self.lr_other)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("grad_clip", format!("{:?}", self.grad_clip)),
            ("epochs", self.epochs.to_string()),
            ("steps", self.steps.to_string()),
            ("batch", self.batch.to_string()),
            ("seed", self.seed.to_string()),
            ("detach", self.detach.to_string()),
            ("test_memory", self.test_memory.to_string()),
            ("variant", variant_str(self.variant).to_string()),
            ("feature", feature_str(self.feature).to_string()),
            ("depth", self.depth.as_str().to_string()),
            ("flip", self.flip.to_string()),
        ]
    }

    /// Parses configuration text on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ConfigError {
                path: None,
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        cfg.validate().map_err(|msg| ConfigError { path: None, line: 0, msg })?;
        Ok(cfg)
    }

    /// Reads a file and applies the `M4_SEED` override.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: Some(path.to_path_buf()),
            line: 0,
            msg: e.to_string(),
        })?;
        let mut cfg = Self::parse(&text).map_err(|e| ConfigError {
            path: Some(path.to_path_buf()),
            ..e
        })?;
        cfg.apply_env().map_err(|msg| ConfigError {
            path: None,
            line: 0,
            msg,
        })?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<(), String> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| format!("{SEED_ENV}={v} is not an unsigned integer"))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("input_size", self.input_size),
            ("clip_len", self.clip_len),
            ("rank", self.rank),
            ("experts", self.experts),
            ("top_k", self.top_k),
            ("batch", self.batch),
            ("test_memory", self.test_memory),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(format!("{k} must be positive"));
        }
        if self.epochs == 0 && self.steps == 0 {
            return Err("one of epochs or steps must be positive".into());
        }
        for (k, v) in [
            ("lr_adapter", self.lr_adapter),
            ("lr_other", self.lr_other),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{k} must be positive"));
            }
        }
        for (k, v) in [("moe_lambda", self.moe_lambda), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{k} must be non-negative"));
            }
        }
        if self.experts != EXPERTS_PER_GROUP {
            return Err(format!("experts per group is fixed at {EXPERTS_PER_GROUP}"));
        }
        if self.top_k > self.experts {
            return Err(format!("top_k {} exceeds {} experts per group", self.top_k, self.experts));
        }
        let enc = EncoderConfig {
            input_size: self.input_size,
            ..EncoderConfig::default()
        };
        enc.validate().map_err(|e| e.to_string())
    }

    /// Architecture keys whose values differ between the two configs.
    pub fn architecture_diff(&self, other: &Self) -> Vec<String> {
        let (a, b) = (self.entries(), other.entries());
        a.iter()
            .zip(&b)
            .filter(|((k, va), (_, vb))| ARCHITECTURE_KEYS.contains(k) && va != vb)
            .map(|((k, va), (_, vb))| format!("{k}: {va} vs {vb}"))
            .collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                input_size: self.input_size,
                ..EncoderConfig::default()
            },
            lora: LoraMoeConfig {
                rank: self.rank,
                top_k: self.top_k,
                experts: true,
            },
            memory: MemoryConfig {
                variant: self.variant,
                feature: self.feature,
                capacity: self.clip_len,
                detach: self.detach,
                ..MemoryConfig::default()
            },
            ..ModelConfig::default()
        }
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}
